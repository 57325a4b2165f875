#include "gemm.hpp"

#include <cstring>
#include <vector>

namespace moex::detail {

namespace {

typedef float v8 __attribute__((vector_size(32)));

inline v8 load(const float* p) {
  v8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store(float* p, v8 v) { std::memcpy(p, &v, sizeof v); }

template <int R>
void block(std::int64_t i0, std::int64_t j0, std::int64_t k, ConstView a, const float* b, std::int64_t ldb, float* c,
           std::int64_t ldc, bool accumulate) {
  v8 acc[R][2] = {};
  for (std::int64_t t = 0; t < k; ++t) {
    const v8 b0 = load(b + t * ldb + j0);
    const v8 b1 = load(b + t * ldb + j0 + 8);
    for (int r = 0; r < R; ++r) {
      const float s = a.ptr[(i0 + r) * a.rs + t * a.cs];
      acc[r][0] = acc[r][0] + s * b0;
      acc[r][1] = acc[r][1] + s * b1;
    }
  }
  for (int r = 0; r < R; ++r) {
    float* dst = c + (i0 + r) * ldc + j0;
    if (accumulate) {
      store(dst, load(dst) + acc[r][0]);
      store(dst + 8, load(dst + 8) + acc[r][1]);
    } else {
      store(dst, acc[r][0]);
      store(dst + 8, acc[r][1]);
    }
  }
}

}  // namespace

void gemm(std::int64_t m, std::int64_t n, std::int64_t k, ConstView a, ConstView b, float* c, std::int64_t ldc,
          bool accumulate) {
  if (m == 0 || n == 0) return;
  std::vector<float> packed;
  const float* bp = b.ptr;
  std::int64_t ldb = b.rs;
  if (b.cs != 1) {
    packed.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t t = 0; t < k; ++t) {
      for (std::int64_t j = 0; j < n; ++j) packed[static_cast<std::size_t>(t * n + j)] = b.ptr[t * b.rs + j * b.cs];
    }
    bp = packed.data();
    ldb = n;
  }
  const std::int64_t nv = n - n % 16;
  for (std::int64_t j0 = 0; j0 < nv; j0 += 16) {
    std::int64_t i0 = 0;
    for (; i0 + 4 <= m; i0 += 4) block<4>(i0, j0, k, a, bp, ldb, c, ldc, accumulate);
    for (; i0 < m; ++i0) block<1>(i0, j0, k, a, bp, ldb, c, ldc, accumulate);
  }
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = nv; j < n; ++j) {
      float s = 0.0f;
      for (std::int64_t t = 0; t < k; ++t) s = s + a.ptr[i * a.rs + t * a.cs] * bp[t * ldb + j];
      float& dst = c[i * ldc + j];
      dst = accumulate ? dst + s : s;
    }
  }
}

}  // namespace moex::detail
