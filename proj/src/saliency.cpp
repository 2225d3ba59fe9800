#include "ckdsnn/saliency.hpp"

#include <algorithm>
#include <fstream>

namespace ckdsnn {

std::string to_string(ScaleKind kind) {
  switch (kind) {
    case ScaleKind::softmax: return "softmax";
    case ScaleKind::l2_norm: return "l2";
    case ScaleKind::z_score: return "zscore";
    case ScaleKind::none: return "none";
  }
  return "?";
}

ScaleKind parse_scale_kind(std::string_view text) {
  if (text == "softmax") return ScaleKind::softmax;
  if (text == "l2" || text == "l2_norm") return ScaleKind::l2_norm;
  if (text == "zscore" || text == "z_score") return ScaleKind::z_score;
  if (text == "none") return ScaleKind::none;
  throw std::invalid_argument("unknown scale mode '" + std::string(text) + "' (softmax|l2|zscore|none)");
}

void write_pgm(const std::filesystem::path& path, const float* values, Index height, Index width) {
  if (height < 1 || width < 1) throw std::invalid_argument("write_pgm: empty map");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const Index n = height * width;
  const auto [lo, hi] = std::minmax_element(values, values + n);
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (Index i = 0; i < n; ++i) {
    const double v = range > 0 ? (static_cast<double>(values[i]) - *lo) / range : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_map_csv(const std::filesystem::path& path, const float* values, Index height, Index width) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(9);
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      if (x) out << ',';
      out << values[y * width + x];
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace ckdsnn
