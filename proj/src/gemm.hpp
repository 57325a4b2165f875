#pragma once

#include <cstdint>

namespace moex::detail {

/// Strided view: element (i, j) lives at ptr[i·rs + j·cs].
struct ConstView {
  const float* ptr;
  std::int64_t rs;
  std::int64_t cs;
};

/// C (m×n, row stride ldc) = A·B, or C += A·B when `accumulate`.
/// Every output element is summed over t = 0..k-1 in order with separate
/// multiply and add, so a row's result never depends on the other rows,
/// on blocking, or on buffer alignment.
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, ConstView a, ConstView b, float* c, std::int64_t ldc,
          bool accumulate);

}  // namespace moex::detail
