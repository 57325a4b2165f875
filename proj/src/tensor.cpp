#include "moex/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "gemm.hpp"
#include "moex/error.hpp"

namespace moex {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_numel(shape_)), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw DimensionError("shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::identity(std::int64_t n) {
  Tensor t({n, n});
  for (std::int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const auto r = static_cast<std::int64_t>(rows.size());
  const auto c = r ? static_cast<std::int64_t>(rows.begin()->size()) : 0;
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<std::int64_t>(row.size()) != c) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
  return Tensor({static_cast<std::int64_t>(values.size())}, std::vector<float>(values));
}

Tensor Tensor::vector(std::vector<float> values) {
  const auto n = static_cast<std::int64_t>(values.size());
  return Tensor({n}, std::move(values));
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw DimensionError("axis out of range for " + shape_to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

std::int64_t Tensor::rows() const {
  const auto c = cols();
  return c == 0 ? 0 : numel() / c;
}

std::span<float> Tensor::row(std::int64_t r) {
  const auto c = cols();
  return {data_.data() + r * c, static_cast<std::size_t>(c)};
}

std::span<const float> Tensor::row(std::int64_t r) const {
  const auto c = cols();
  return {data_.data() + r * c, static_cast<std::size_t>(c)};
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::identical(const Tensor& other) const noexcept {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  detail::gemm(a.dim(0), b.dim(1), a.dim(1), {a.data(), a.dim(1), 1}, {b.data(), b.dim(1), 1}, c.data(), c.dim(1),
               false);
  require_finite(c, "matmul");
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  if (a.dim(0) != b.dim(0)) throw DimensionError("matmul_tn: row counts disagree");
  Tensor c({a.dim(1), b.dim(1)});
  detail::gemm(a.dim(1), b.dim(1), a.dim(0), {a.data(), 1, a.dim(1)}, {b.data(), b.dim(1), 1}, c.data(), c.dim(1),
               false);
  require_finite(c, "matmul_tn");
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) throw DimensionError("matmul_nt: column counts disagree");
  Tensor c({a.dim(0), b.dim(0)});
  detail::gemm(a.dim(0), b.dim(0), a.dim(1), {a.data(), a.dim(1), 1}, {b.data(), 1, b.dim(1)}, c.data(), c.dim(1),
               false);
  require_finite(c, "matmul_nt");
  return c;
}

float gelu(float x) noexcept {
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::erf(xd * M_SQRT1_2)));
}

float gelu_derivative(float x) noexcept {
  const double xd = x;
  const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;
  return static_cast<float>(cdf + xd * pdf);
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = gelu(x[i]);
  require_finite(y, "gelu");
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (!(eps > 0.0f)) throw ConfigError("layer_norm: eps must be positive");
  const auto e = x.cols();
  if (gamma.numel() != e || beta.numel() != e) throw DimensionError("layer_norm: affine size mismatch");
  Tensor y(x.shape());
  for (std::int64_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(e);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(e);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < e; ++i) {
      out[i] = static_cast<float>((in[i] - mean) * rstd) * gamma[i] + beta[i];
    }
  }
  require_finite(y, "layer_norm");
  return y;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor y(x.shape());
  for (std::int64_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    float mx = in.empty() ? 0.0f : in[0];
    for (float v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      out[i] = std::exp(in[i] - mx);
      sum += out[i];
    }
    const auto inv = static_cast<float>(1.0 / sum);
    for (auto& v : out) v *= inv;
  }
  require_finite(y, "softmax");
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: shape mismatch");
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] + b[i];
  return c;
}

Tensor scale(const Tensor& a, float factor) {
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] * factor;
  return c;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("max_abs_diff: size mismatch");
  float m = 0.0f;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

bool all_finite(std::span<const float> v) noexcept {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void require_finite(const Tensor& t, const char* what) {
  if (!all_finite(t.values())) throw NumericError(std::string(what) + ": non-finite value produced");
}

}  // namespace moex
