#include "moex/train.hpp"

#include <cmath>
#include <numeric>

#include "moex/error.hpp"

namespace moex {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  optimizer.validate();
}

void check_dataset(const ModelSpec& spec, const Dataset& data) {
  if (data.size() == 0) throw ValidationError("dataset is empty");
  if (data.channels() != spec.channels || data.image_size() != spec.image_size || data.images.dim(3) != spec.image_size) {
    throw DimensionError("dataset images are " + shape_to_string(data.images.shape()) + " but the model expects " +
                         std::to_string(spec.channels) + "x" + std::to_string(spec.image_size) + "x" +
                         std::to_string(spec.image_size));
  }
  for (int y : data.labels) {
    if (y < 0 || y >= spec.num_classes) {
      throw ValidationError("label " + std::to_string(y) + " outside [0, " + std::to_string(spec.num_classes) + ")");
    }
  }
}

void collect_params(ModelWeights& params, const ModelWeights& grads, std::vector<Tensor*>& out_params,
                    std::vector<const Tensor*>& out_grads) {
  params.for_each([&](const std::string&, Tensor& t) { out_params.push_back(&t); });
  grads.for_each([&](const std::string&, const Tensor& t) { out_grads.push_back(&t); });
  if (out_params.size() != out_grads.size()) throw DimensionError("gradient structure differs from parameters");
}

ModelWeights train_base(const ModelSpec& spec, const Dataset& data, const TrainConfig& config, Rng& rng,
                        const std::function<void(const EpochStats&)>& on_epoch) {
  spec.validate();
  config.validate();
  check_dataset(spec, data);
  ModelWeights w = ModelWeights::init(spec, rng);
  if (config.epochs == 0) return w;

  AdamW opt(config.optimizer);
  const std::int64_t n = data.size();
  const std::int64_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::int64_t total = per_epoch * config.epochs;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      const std::int64_t end = std::min(n, start + config.batch_size);
      std::span<const std::int64_t> idx(order.data() + start, static_cast<std::size_t>(end - start));
      Tensor images = data.gather(idx);
      std::vector<int> labels = data.gather_labels(idx);
      auto g = backward(spec, w, images, labels, LossSpec::cross_entropy());
      if (!std::isfinite(g.loss)) throw NumericError("training loss diverged at epoch " + std::to_string(epoch));
      loss_sum += g.loss * static_cast<double>(end - start);
      auto pred = argmax_rows(g.logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];

      std::vector<Tensor*> params;
      std::vector<const Tensor*> grads;
      collect_params(w, g.grads, params, grads);
      opt.step(params, grads, cosine_lr(config.optimizer.lr, step, total));
      ++step;
    }
    for (const auto& b : w.blocks) require_finite(b.mlp.w1, "training weights");
    if (on_epoch) {
      on_epoch({epoch, loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)});
    }
  }
  return w;
}

}  // namespace moex
