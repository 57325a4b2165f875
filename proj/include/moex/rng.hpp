#pragma once

#include <cstdint>
#include <vector>

#include "moex/tensor.hpp"

namespace moex {

/// Stateless 64-bit mixer (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Hash of several integers, used for keyed draws that must not depend on
/// call order (random routing, per-expert random selection).
std::uint64_t hash_combine(std::initializer_list<std::uint64_t> values) noexcept;

/// Counter-based generator: draw i is mix(seed, i). Identical seed and call
/// sequence give bit-identical integer streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Standard normal via Box-Muller (one value per two uniforms, no caching).
  double normal() noexcept;

  /// Independent child stream; does not advance this generator.
  Rng fork(std::uint64_t stream) const noexcept;

  template <class T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Sorted sample of `count` distinct indices from [0, n).
  std::vector<int> sample_without_replacement(int n, int count);

  Tensor normal_tensor(Shape shape, float stddev);
  Tensor uniform_tensor(Shape shape, float lo, float hi);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace moex
