#include "moex/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "moex/error.hpp"

namespace moex {

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
}

double cosine_lr(double base, std::int64_t step, std::int64_t total, double floor) {
  if (total <= 0) return base;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  const double lo = base * floor;
  return lo + 0.5 * (base - lo) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(AdamWConfig config) : config_(config) { config_.validate(); }

void AdamW::step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
  if (params.size() != grads.size()) throw DimensionError("parameter and gradient lists differ in length");
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  } else if (m_.size() != params.size()) {
    throw DimensionError("parameter list changed between optimizer steps");
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (p.shape() != g.shape() || p.shape() != m_[i].shape()) {
      throw DimensionError("gradient shape " + shape_to_string(g.shape()) + " does not match parameter " +
                           shape_to_string(p.shape()));
    }
    const double decay = p.rank() >= 2 ? config_.weight_decay : 0.0;
    float* pd = p.data();
    float* md = m_[i].data();
    float* vd = v_[i].data();
    const float* gd = g.data();
    for (std::int64_t k = 0; k < p.numel(); ++k) {
      const double gk = gd[k];
      const double m = b1 * md[k] + (1.0 - b1) * gk;
      const double v = b2 * vd[k] + (1.0 - b2) * gk * gk;
      md[k] = static_cast<float>(m);
      vd[k] = static_cast<float>(v);
      double w = pd[k];
      w -= lr * decay * w;
      w -= lr * (m / c1) / (std::sqrt(v / c2) + config_.eps);
      pd[k] = static_cast<float>(w);
    }
  }
}

}  // namespace moex
