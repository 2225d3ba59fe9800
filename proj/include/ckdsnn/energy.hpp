#pragma once

#include "ckdsnn/models.hpp"
#include "ckdsnn/spiking.hpp"

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace ckdsnn {

/// Integer spike tally; the percentage is formed by a single final division.
struct SpikeCount {
  std::int64_t ones = 0;
  std::int64_t total = 0;

  template <typename Scalar>
  void add(const SpikeTrain<Scalar>& train) {
    if (!train.is_binary()) throw std::invalid_argument("fire_rate: spike train is not binary");
    const auto& v = train.spikes.data();
    for (Index i = 0; i < v.size(); ++i) ones += v[i] != Scalar(0) ? 1 : 0;
    total += v.size();
  }
  void add(const SpikeCount& other) {
    ones += other.ones;
    total += other.total;
  }
  double fraction() const;
  double percent() const;
};

/// 100 * ones / elements.
template <typename Scalar>
double fire_rate(const SpikeTrain<Scalar>& train) {
  if (train.spikes.numel() == 0) throw std::invalid_argument("fire_rate: empty spike train");
  SpikeCount c;
  c.add(train);
  return c.percent();
}

struct LayerProfile {
  std::string name;
  double macs = 0;             // per sample, per time step
  double input_fire_rate = 0;  // fraction in [0, 1] of input entries that spike
  bool analog_input = false;   // encoding layer: charged at MAC cost, not as SOPs
};

struct EnergyConstants {
  double e_ac_pj = 0.9;
  double e_mac_pj = 4.6;
};

/// sum over spiking layers of input_fire_rate * MACs * T. Analog-input layers are skipped.
double count_sops(const std::vector<LayerProfile>& profiles, Index time_steps);

/// (E_AC * SOPs + E_MAC * first_layer_macs * T) in millijoules.
double estimate_energy_mj(double sops, double first_layer_macs, Index time_steps,
                          const EnergyConstants& constants = {});

struct EnergyReport {
  double fire_rate_percent = 0;
  double sops = 0;
  double energy_mj = 0;
  double first_layer_macs = 0;
  Index time_steps = 0;
  EnergyConstants constants;
  std::vector<LayerProfile> layers;
};

/// Profiles of the student's parameterised layers: stage 1 sees the analog
/// image, stage s + 1 sees stage s spikes, the head sees stage 4 spikes.
std::vector<LayerProfile> student_profiles(const Architecture& arch, Index height, Index width,
                                           const std::array<SpikeCount, kStages>& stage_counts);

EnergyReport make_energy_report(const Architecture& arch, Index height, Index width,
                                const std::array<SpikeCount, kStages>& stage_counts, Index time_steps,
                                const EnergyConstants& constants = {});

/// layer,macs,input_fire_rate,sops rows followed by a total row.
void write_energy_csv(const EnergyReport& report, std::ostream& out);
void write_energy_csv(const EnergyReport& report, const std::filesystem::path& path);

}  // namespace ckdsnn
