#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace kdlab {

// Seeded generator whose every derived draw is defined here rather than by the
// standard library's distributions, so streams are identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound);
  // Standard normal (Box-Muller, one value per call).
  double normal();
  // Normal(0, std) resampled until within two standard deviations.
  double truncated_normal(double std);
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream derived from this generator's seed material.
  static Rng fork(std::uint64_t seed, std::uint64_t stream);

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

// Deterministic 64-bit mixer (SplitMix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

}  // namespace kdlab
