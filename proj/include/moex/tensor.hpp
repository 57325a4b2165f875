#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace moex {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float32 array. Value type: copies are deep, moves are cheap.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor full(Shape shape, float value);
  static Tensor identity(std::int64_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);
  static Tensor vector(std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  // Two-dimensional view: last axis is the column axis, the rest are folded into rows.
  std::int64_t rows() const;
  std::int64_t cols() const;

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  float& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  float at(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * cols() + c)];
  }

  std::span<float> row(std::int64_t r);
  std::span<const float> row(std::int64_t r) const;

  Tensor reshape(Shape shape) const;
  void fill(float value);

  /// Bitwise equality of shape and contents (NaN payloads included).
  bool identical(const Tensor& other) const noexcept;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Linear algebra. All products accumulate in at least float32; inputs must
// be rank 2 (vectors are treated as 1×n where noted).
Tensor matmul(const Tensor& a, const Tensor& b);
/// aᵀ·b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a·bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Exact GELU, x·Φ(x) with the erf-based normal CDF.
float gelu(float x) noexcept;
/// d/dx of exact GELU.
float gelu_derivative(float x) noexcept;
Tensor gelu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);
Tensor softmax_rows(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

float max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(std::span<const float> v);

/// Throws NumericError naming `what` if any element is NaN/Inf.
void require_finite(const Tensor& t, const char* what);
bool all_finite(std::span<const float> v) noexcept;

}  // namespace moex
