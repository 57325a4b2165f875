#include "moex/rng.hpp"

#include <algorithm>
#include <cmath>

namespace moex {

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_combine(std::initializer_list<std::uint64_t> values) noexcept {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto v : values) h = mix64(h ^ mix64(v));
  return h;
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t key = mix64(seed_);
  return mix64(key ^ mix64(counter_++ * 0xd1b54a32d192ed03ULL));
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

double Rng::normal() noexcept {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Rng Rng::fork(std::uint64_t stream) const noexcept {
  return Rng(hash_combine({seed_, counter_, stream}), 0);
}

std::vector<int> Rng::sample_without_replacement(int n, int count) {
  count = std::clamp(count, 0, n);
  std::vector<int> pool(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates over the first `count` slots.
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(below(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(count));
  std::sort(pool.begin(), pool.end());
  return pool;
}

Tensor Rng::normal_tensor(Shape shape, float stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(normal() * stddev);
  return t;
}

Tensor Rng::uniform_tensor(Shape shape, float lo, float hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(uniform(lo, hi));
  return t;
}

}  // namespace moex
