#include "ckdsnn/energy.hpp"

#include <fstream>
#include <stdexcept>

namespace ckdsnn {

double SpikeCount::fraction() const {
  if (total == 0) throw std::invalid_argument("fire_rate: empty spike train");
  return static_cast<double>(ones) / static_cast<double>(total);
}

double SpikeCount::percent() const {
  if (total == 0) throw std::invalid_argument("fire_rate: empty spike train");
  return static_cast<double>(100 * ones) / static_cast<double>(total);
}

double count_sops(const std::vector<LayerProfile>& profiles, Index time_steps) {
  if (time_steps < 0) throw std::invalid_argument("count_sops: negative time steps");
  double total = 0;
  for (const auto& p : profiles) {
    if (p.macs < 0 || p.input_fire_rate < 0 || p.input_fire_rate > 1) {
      throw std::invalid_argument("count_sops: layer " + p.name + " has negative MACs or a rate outside [0, 1]");
    }
    if (!p.analog_input) total += p.input_fire_rate * p.macs * static_cast<double>(time_steps);
  }
  return total;
}

double estimate_energy_mj(double sops, double first_layer_macs, Index time_steps, const EnergyConstants& constants) {
  if (sops < 0 || first_layer_macs < 0 || time_steps < 0) throw std::invalid_argument("estimate_energy: negative count");
  const double pj = constants.e_ac_pj * sops + constants.e_mac_pj * first_layer_macs * static_cast<double>(time_steps);
  return pj * 1e-9;
}

std::vector<LayerProfile> student_profiles(const Architecture& arch, Index height, Index width,
                                           const std::array<SpikeCount, kStages>& stage_counts) {
  const auto macs = layer_macs(arch, height, width);
  std::vector<LayerProfile> out;
  for (std::size_t i = 0; i < macs.size(); ++i) {
    LayerProfile p{macs[i].name, macs[i].macs, 0.0, i == 0};
    if (i > 0) p.input_fire_rate = stage_counts[i - 1].fraction();
    out.push_back(p);
  }
  return out;
}

EnergyReport make_energy_report(const Architecture& arch, Index height, Index width,
                                const std::array<SpikeCount, kStages>& stage_counts, Index time_steps,
                                const EnergyConstants& constants) {
  EnergyReport r;
  SpikeCount all;
  for (const auto& c : stage_counts) all.add(c);
  r.fire_rate_percent = all.percent();
  r.layers = student_profiles(arch, height, width, stage_counts);
  r.sops = count_sops(r.layers, time_steps);
  r.first_layer_macs = r.layers.front().macs;
  r.time_steps = time_steps;
  r.constants = constants;
  r.energy_mj = estimate_energy_mj(r.sops, r.first_layer_macs, time_steps, constants);
  return r;
}

void write_energy_csv(const EnergyReport& report, std::ostream& out) {
  out.precision(10);
  out << "layer,macs,input_fire_rate,sops\n";
  for (const auto& p : report.layers) {
    const double sops = p.analog_input ? 0.0 : p.input_fire_rate * p.macs * static_cast<double>(report.time_steps);
    out << p.name << ',' << p.macs << ',' << (p.analog_input ? 1.0 : p.input_fire_rate) << ',' << sops << '\n';
  }
  out << "total,,," << report.sops << '\n';
  out << "# fire_rate_percent=" << report.fire_rate_percent << " energy_mj=" << report.energy_mj
      << " e_ac_pj=" << report.constants.e_ac_pj << " e_mac_pj=" << report.constants.e_mac_pj
      << " time_steps=" << report.time_steps << '\n';
}

void write_energy_csv(const EnergyReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_energy_csv(report, out);
}

}  // namespace ckdsnn
