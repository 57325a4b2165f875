#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moex/tensor.hpp"

namespace moex {

/// Decoupled weight decay Adam. Decay applies to matrices (rank ≥ 2) only;
/// biases, LayerNorm affines, embedding vectors and routing means are not decayed.
struct AdamWConfig {
  double lr = 1.5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

/// Cosine annealing from `base` at step 0 to `base·floor` at `total`.
double cosine_lr(double base, std::int64_t step, std::int64_t total, double floor = 0.0);

class AdamW {
 public:
  explicit AdamW(AdamWConfig config);

  /// params[i] -= update(grads[i]). The parameter list must keep the same
  /// order and shapes between calls.
  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr);

  std::int64_t steps() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  AdamWConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t t_ = 0;
};

}  // namespace moex
