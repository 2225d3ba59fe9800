#include "ckdsnn/distill.hpp"

#include <sstream>

namespace ckdsnn {

NoiseConfig parse_noise_mode(std::string_view text, double lambda) {
  NoiseConfig config;
  config.lambda = lambda;
  if (text == "adaptive") {
    config.kind = NoiseKind::adaptive;
  } else if (text == "none") {
    config.kind = NoiseKind::none;
  } else if (text.starts_with("fixed:")) {
    const std::string number(text.substr(6));
    std::size_t used = 0;
    double std_dev = 0;
    try {
      std_dev = std::stod(number, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (number.empty() || used != number.size() || !(std_dev >= 0)) {
      throw std::invalid_argument("bad fixed noise std in '" + std::string(text) + "'");
    }
    config.kind = NoiseKind::fixed;
    config.fixed_std = std_dev;
  } else {
    throw std::invalid_argument("unknown noise mode '" + std::string(text) + "' (adaptive|fixed:<std>|none)");
  }
  config.validate();
  return config;
}

std::string to_string(const NoiseConfig& config) {
  switch (config.kind) {
    case NoiseKind::adaptive: return "adaptive";
    case NoiseKind::none: return "none";
    case NoiseKind::fixed: {
      std::ostringstream os;
      os << "fixed:" << config.fixed_std;
      return os.str();
    }
  }
  return "?";
}

}  // namespace ckdsnn
