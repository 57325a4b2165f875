#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "moex/dataset.hpp"
#include "moex/moe.hpp"
#include "moex/optim.hpp"

namespace moex {

struct FinetuneConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 1.5e-5;
  double weight_decay = 0.01;
  double temperature = 2.0;
  double kd_weight = 0.5;
  bool update_router_means = false;
  double router_momentum = 0.99;
  bool train_head = true;  // false keeps the classifier head frozen
  std::uint64_t seed = 0;

  void validate() const;
  LossSpec loss() const { return LossSpec::combined(kd_weight, temperature); }
};

struct EvalResult {
  double top1 = 0.0;
  double loss = 0.0;  // mean cross-entropy
  std::int64_t correct = 0;
  std::int64_t total = 0;
  RoutingTrace trace;  // filled when requested, class labels included
};

EvalResult evaluate(const MoeModel& model, const Dataset& data, bool want_trace = false, int batch_size = 128);
EvalResult evaluate(const ModelSpec& spec, const ModelWeights& weights, const Dataset& data, int batch_size = 128);

/// Gradients of an MoE model with routes held fixed at their forward values.
struct MoeGradients {
  ModelWeights dense;               // converted layers carry an empty MLP
  std::vector<MlpParams> moe;       // compacted-shape gradients, empty for dense layers
  double loss = 0.0;
  Tensor logits;
  std::vector<std::vector<int>> routes;  // per layer and MLP input row
};

/// `options.routes_out` is ignored; routes land in the result.
MoeGradients moe_backward(const MoeModel& model, const Tensor& images, std::span<const int> labels,
                          const LossSpec& loss, const Tensor* teacher_logits = nullptr,
                          const MoeForwardOptions& options = {});

/// Parameter/gradient pairs in a fixed order: dense tensors, then the
/// compacted weights of each converted layer.
void collect_params(MoeModel& model, const MoeGradients& grads, std::vector<Tensor*>& params,
                    std::vector<const Tensor*>& grad_list);

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_top1 = -1.0;  // -1 when no evaluation set was given
  double macs = 0.0;
  std::int64_t params = 0;
};

/// Distillation from a dense teacher. Routing means stay fixed unless
/// update_router_means is set, in which case they follow an EMA of the
/// normalized mean of each expert's routed inputs.
MoeModel finetune(const MoeModel& student, const ModelWeights& teacher, const Dataset& train,
                  const FinetuneConfig& config, const Dataset* eval = nullptr,
                  const std::function<void(const FinetuneEpoch&)>& on_epoch = {});

/// {"epoch":…,"train_loss":…,"eval_top1":…,"macs":…,"params":…}
std::string to_jsonl(const FinetuneEpoch& e);

}  // namespace moex
