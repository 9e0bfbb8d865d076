#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ageflow {

/// Counter-based generator: draw i is a pure function of (seed, i), so a
/// stream can be forked or replayed without carrying hidden state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return mix(seed_ * 0xD1B54A32D192ED03ULL + (++counter_) * kGamma); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) - lo + 1);
    return lo + static_cast<int>(next_u64() % span);
  }

  /// Standard normal via Box-Muller; one draw per call, the pair's second half is discarded.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Independent child stream; does not advance this generator.
  Rng fork(std::uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + 0x632BE59BD9B4E019ULL))); }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace ageflow
