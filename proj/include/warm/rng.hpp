#pragma once

#include <cstdint>

namespace warm {

// xoshiro256** seeded through splitmix64. Gaussians use Box-Muller on our own
// uniforms so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n); n > 0. Unbiased (rejection).
  std::uint64_t below(std::uint64_t n);
  double gaussian();

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Derives an independent stream seed, e.g. for episode i of a run.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace warm
