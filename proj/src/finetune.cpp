#include "moex/finetune.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moex/error.hpp"
#include "moex/train.hpp"

namespace moex {

void FinetuneConfig::validate() const {
  if (epochs < 0) throw ConfigError("fine-tune epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("fine-tune batch size must be positive");
  if (!(kd_weight >= 0.0 && kd_weight <= 1.0)) throw ConfigError("kd_weight must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("distillation temperature must be positive");
  if (!(router_momentum >= 0.0 && router_momentum < 1.0)) throw ConfigError("router momentum must lie in [0, 1)");
  AdamWConfig{.lr = lr, .weight_decay = weight_decay}.validate();
}

namespace {

EvalResult evaluate_with(const Dataset& data, int batch_size,
                         const std::function<Tensor(const Tensor&, std::span<const std::int64_t>)>& run) {
  if (data.size() == 0) throw ValidationError("cannot evaluate on an empty dataset");
  if (batch_size < 1) throw ConfigError("evaluation batch size must be positive");
  EvalResult r;
  double loss_sum = 0.0;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto end = std::min(data.size(), start + batch_size);
    idx.resize(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor logits = run(data.gather(idx), idx);
    auto labels = data.gather_labels(idx);
    auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) r.correct += pred[i] == labels[i];
    loss_sum += compute_loss(logits, labels, LossSpec::cross_entropy(), nullptr).loss * static_cast<double>(idx.size());
  }
  r.total = data.size();
  r.top1 = static_cast<double>(r.correct) / static_cast<double>(r.total);
  r.loss = loss_sum / static_cast<double>(r.total);
  return r;
}

}  // namespace

EvalResult evaluate(const MoeModel& model, const Dataset& data, bool want_trace, int batch_size) {
  check_dataset(model.spec, data);
  RoutingTrace trace;
  MoeForwardOptions opt;
  if (want_trace) opt.trace = &trace;
  auto r = evaluate_with(data, batch_size, [&](const Tensor& images, std::span<const std::int64_t> ids) {
    return moe_forward(model, images, ids, opt);
  });
  if (want_trace) {
    for (auto& ev : trace.events) ev.class_label = data.labels[static_cast<std::size_t>(ev.image_id)];
    r.trace = std::move(trace);
  }
  return r;
}

EvalResult evaluate(const ModelSpec& spec, const ModelWeights& weights, const Dataset& data, int batch_size) {
  check_dataset(spec, data);
  return evaluate_with(data, batch_size, [&](const Tensor& images, std::span<const std::int64_t>) {
    return forward(spec, weights, images);
  });
}

MoeGradients moe_backward(const MoeModel& model, const Tensor& images, std::span<const int> labels,
                          const LossSpec& loss, const Tensor* teacher_logits, const MoeForwardOptions& options) {
  MoeGradients out;
  MoeForwardOptions opt = options;
  opt.routes_out = &out.routes;
  MoeMlpBackend backend(model, opt);
  auto fwd = encoder_forward(model.spec, model.weights, backend, images, {}, true);
  auto lr = compute_loss(fwd.logits, labels, loss, teacher_logits);
  out.dense = model.weights.zeros_like();
  out.moe.resize(model.layers.size());
  for (int l : model.converted_layers()) {
    const auto& c = model.layers[static_cast<std::size_t>(l)]->compact;
    auto& g = out.moe[static_cast<std::size_t>(l)];
    g.w1 = Tensor(c.w1.shape());
    g.b1 = Tensor(c.b1.shape());
    g.w2 = Tensor(c.w2.shape());
    g.b2 = Tensor(c.b2.shape());
  }
  encoder_backward(model.spec, model.weights, backend, *fwd.cache, lr.grad_logits, out.dense, [&](int l) -> MlpParams& {
    return model.converted(l) ? out.moe[static_cast<std::size_t>(l)] : out.dense.blocks[static_cast<std::size_t>(l)].mlp;
  });
  out.loss = lr.loss;
  out.logits = std::move(fwd.logits);
  return out;
}

void collect_params(MoeModel& model, const MoeGradients& grads, std::vector<Tensor*>& params,
                    std::vector<const Tensor*>& grad_list) {
  collect_params(model.weights, grads.dense, params, grad_list);
  for (int l : model.converted_layers()) {
    auto& c = model.layers[static_cast<std::size_t>(l)]->compact;
    const auto& g = grads.moe[static_cast<std::size_t>(l)];
    for (auto [p, q] : {std::pair{&c.w1, &g.w1}, {&c.b1, &g.b1}, {&c.w2, &g.w2}, {&c.b2, &g.b2}}) {
      params.push_back(p);
      grad_list.push_back(q);
    }
  }
}

namespace {

void update_means(MoeModel& model, const RouterInputs& inputs, double momentum) {
  const auto e = static_cast<std::size_t>(model.spec.embed_dim);
  for (int l : model.converted_layers()) {
    auto& ml = *model.layers[static_cast<std::size_t>(l)];
    const auto& sums = inputs.sums[static_cast<std::size_t>(l)];
    const auto& counts = inputs.counts[static_cast<std::size_t>(l)];
    for (int c = 0; c < ml.num_experts(); ++c) {
      const auto n = counts[static_cast<std::size_t>(c)];
      if (n == 0) continue;
      const double* s = sums.data() + static_cast<std::size_t>(c) * e;
      double target_norm = 0.0;
      for (std::size_t i = 0; i < e; ++i) target_norm += s[i] * s[i];
      target_norm = std::sqrt(target_norm);
      if (target_norm < 1e-12) continue;
      auto mu = ml.means.row(c);
      std::vector<double> next(e);
      double norm = 0.0;
      for (std::size_t i = 0; i < e; ++i) {
        next[i] = momentum * mu[i] + (1.0 - momentum) * s[i] / target_norm;
        norm += next[i] * next[i];
      }
      norm = std::sqrt(norm);
      if (norm < 1e-12) continue;
      for (std::size_t i = 0; i < e; ++i) mu[i] = static_cast<float>(next[i] / norm);
    }
  }
}

}  // namespace

MoeModel finetune(const MoeModel& student, const ModelWeights& teacher, const Dataset& train,
                  const FinetuneConfig& config, const Dataset* eval,
                  const std::function<void(const FinetuneEpoch&)>& on_epoch) {
  config.validate();
  student.validate();
  teacher.validate(student.spec);
  check_dataset(student.spec, train);
  MoeModel model = student;
  if (config.epochs == 0) return model;

  const LossSpec loss = config.loss();
  AdamW opt(AdamWConfig{.lr = config.lr, .weight_decay = config.weight_decay});
  Rng rng(config.seed);
  const std::int64_t n = train.size();
  const std::int64_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::int64_t total = per_epoch * config.epochs;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      const auto end = std::min(n, start + config.batch_size);
      std::span<const std::int64_t> idx(order.data() + start, static_cast<std::size_t>(end - start));
      Tensor images = train.gather(idx);
      auto labels = train.gather_labels(idx);
      Tensor teacher_logits;
      if (loss.needs_teacher()) teacher_logits = forward(student.spec, teacher, images);
      RouterInputs inputs;
      MoeForwardOptions fo;
      if (config.update_router_means) fo.router_inputs = &inputs;
      auto g = moe_backward(model, images, labels, loss, loss.needs_teacher() ? &teacher_logits : nullptr, fo);
      if (!std::isfinite(g.loss)) throw NumericError("fine-tune loss diverged at epoch " + std::to_string(epoch));
      loss_sum += g.loss * static_cast<double>(idx.size());
      std::vector<Tensor*> params;
      std::vector<const Tensor*> grads;
      collect_params(model, g, params, grads);
      if (!config.train_head) {
        for (std::size_t i = params.size(); i-- > 0;) {
          if (params[i] == &model.weights.head_w || params[i] == &model.weights.head_b) {
            params.erase(params.begin() + static_cast<std::ptrdiff_t>(i));
            grads.erase(grads.begin() + static_cast<std::ptrdiff_t>(i));
          }
        }
      }
      opt.step(params, grads, cosine_lr(config.lr, step, total));
      if (config.update_router_means) update_means(model, inputs, config.router_momentum);
      ++step;
    }
    if (on_epoch) {
      FinetuneEpoch ep;
      ep.epoch = epoch;
      ep.train_loss = loss_sum / static_cast<double>(n);
      RoutingDistribution dist;
      if (eval) {
        auto r = evaluate(model, *eval, true);
        ep.eval_top1 = r.top1;
        dist = routing_distribution_of(model, r.trace);
      }
      const auto cost = count_costs(model, eval ? &dist : nullptr);
      ep.macs = cost.moe_macs;
      ep.params = cost.moe_params;
      on_epoch(ep);
    }
  }
  for (int l : model.converted_layers()) {
    require_finite(model.layers[static_cast<std::size_t>(l)]->compact.w1, "fine-tuned weights");
  }
  return model;
}

std::string to_jsonl(const FinetuneEpoch& e) {
  nlohmann::json j;
  j["epoch"] = e.epoch;
  j["train_loss"] = e.train_loss;
  if (e.eval_top1 >= 0.0) {
    j["eval_top1"] = e.eval_top1;
  } else {
    j["eval_top1"] = nullptr;
  }
  j["macs"] = e.macs;
  j["params"] = e.params;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
}

}  // namespace moex
