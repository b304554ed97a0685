#pragma once

#include <cstdint>

namespace sgdc {

// splitmix64 finalizer; also used to derive per-sample / per-iteration seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// xoshiro256** seeded through splitmix64. Every distribution below is written
// out explicitly so the sequence is identical on every platform and compiler
// (std::normal_distribution and friends are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Integer in [lo, hi] inclusive.
  int range(int lo, int hi);
  bool bernoulli(double p) { return uniform() < p; }
  // Standard normal via Box-Muller (the second variate is cached).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace sgdc
