#pragma once

#include <cstdint>
#include <random>

namespace ckdsnn {

/// Seeded generator. Independent streams (init, shuffle, noise, augmentation)
/// are forked from one root seed so that each consumer's sequence does not
/// depend on how much the others draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  Rng fork(std::uint64_t stream) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::uint32_t raw[2];
    seq.generate(raw, raw + 2);
    return Rng((static_cast<std::uint64_t>(raw[0]) << 32) | raw[1]);
  }

  std::uint64_t seed() const { return seed_; }

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

  /// Inclusive range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  double normal(double mean, double stddev) {
    if (stddev == 0.0) return mean;
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Stream identifiers for Rng::fork.
namespace streams {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t noise = 3;
inline constexpr std::uint64_t augment = 4;
inline constexpr std::uint64_t data = 5;
}  // namespace streams

}  // namespace ckdsnn
