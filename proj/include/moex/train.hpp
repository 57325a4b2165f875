#pragma once

#include <functional>

#include "moex/dataset.hpp"
#include "moex/optim.hpp"
#include "moex/rng.hpp"
#include "moex/vit.hpp"

namespace moex {

struct TrainConfig {
  int epochs = 12;
  int batch_size = 64;
  AdamWConfig optimizer{.lr = 1e-3};

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
};

/// Trains a freshly initialized model with cross-entropy. Initialization and
/// the per-epoch shuffles draw from `rng`.
ModelWeights train_base(const ModelSpec& spec, const Dataset& data, const TrainConfig& config, Rng& rng,
                        const std::function<void(const EpochStats&)>& on_epoch = {});

/// Parameter/gradient pointer pairs over two identically structured weight sets.
void collect_params(ModelWeights& params, const ModelWeights& grads, std::vector<Tensor*>& out_params,
                    std::vector<const Tensor*>& out_grads);

/// Checks image geometry and label range against the model.
void check_dataset(const ModelSpec& spec, const Dataset& data);

}  // namespace moex
