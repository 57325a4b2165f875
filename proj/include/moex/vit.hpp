#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moex/rng.hpp"
#include "moex/tensor.hpp"

namespace moex {

/// Architecture hyperparameters of the encoder-only image classifier.
struct ModelSpec {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int embed_dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  double mlp_ratio = 4.0;
  int num_classes = 10;
  float layer_norm_eps = 1e-6f;

  void validate() const;

  int hidden_dim() const;
  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  /// Class token plus one token per patch.
  int seq_len() const { return 1 + num_patches(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int head_dim() const { return embed_dim / num_heads; }

  bool operator==(const ModelSpec&) const = default;
};

/// Two-layer perceptron y = gelu(x·w1 + b1)·w2 + b2. Also used for the
/// compacted weights of a converted layer, where the hidden width is the
/// number of kept neurons.
struct MlpParams {
  Tensor w1;  // e × hidden
  Tensor b1;  // hidden
  Tensor w2;  // hidden × e
  Tensor b2;  // e

  std::int64_t hidden() const { return w1.empty() ? 0 : w1.dim(1); }
  bool empty() const { return w1.empty(); }
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // e × e matrices, e biases
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  AttentionParams attn;
  Tensor ln2_gamma, ln2_beta;
  MlpParams mlp;
};

struct ModelWeights {
  Tensor patch_w;      // patch_dim × e
  Tensor patch_b;      // e
  Tensor class_token;  // e
  Tensor pos_embed;    // seq_len × e
  std::vector<BlockParams> blocks;
  Tensor norm_gamma, norm_beta;
  Tensor head_w;  // e × num_classes
  Tensor head_b;  // num_classes

  static ModelWeights zeros(const ModelSpec& spec);
  /// Xavier-uniform projections, N(0, 0.02) embeddings, unit LayerNorm.
  static ModelWeights init(const ModelSpec& spec, Rng& rng);

  /// Same structure with every tensor zero-filled (empty tensors stay empty).
  ModelWeights zeros_like() const;

  /// Visits every non-empty tensor with a stable dotted name.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  /// Throws DimensionError / NumericError when shapes or values are invalid.
  /// Blocks listed in `compacted_layers` may carry an empty MLP.
  void validate(const ModelSpec& spec, const std::vector<int>& compacted_layers = {}) const;

  std::int64_t parameter_count() const;
  bool identical(const ModelWeights& other) const;
};

/// One token's MLP input and hidden activation at one layer.
struct ActivationRecord {
  int layer = 0;
  int token_index = 0;  // 0 is the class token
  std::int64_t image_id = 0;
  int class_label = -1;
  Tensor x;  // e, post second LayerNorm
  Tensor y;  // hidden, post-GELU
};

/// Token provenance for a batch being run through the encoder.
struct BatchInfo {
  int seq_len = 0;
  std::span<const std::int64_t> image_ids;  // one per image
};

class MlpCache {
 public:
  virtual ~MlpCache() = default;
};

/// Pluggable MLP stage of every encoder block. The dense implementation is
/// used for plain models; the mixture-of-experts runtime supplies its own.
class MlpBackend {
 public:
  virtual ~MlpBackend() = default;

  /// x: (images·seq_len) × e rows of MLP input. When `cache` is non-null the
  /// backend stores whatever backward() will need.
  virtual Tensor forward(int layer, const Tensor& x, const BatchInfo& batch,
                         std::unique_ptr<MlpCache>* cache) const = 0;

  /// Adds parameter gradients into `grads` and returns dL/dx.
  virtual Tensor backward(int layer, const Tensor& x, const Tensor& grad_out, const MlpCache& cache,
                          MlpParams& grads) const = 0;
};

/// Cached intermediates of dense MLP evaluation; `hidden` is post-GELU.
class DenseMlpCache : public MlpCache {
 public:
  Tensor pre;
  Tensor hidden;
};

/// Dense MLP with every hidden unit active; pre/hidden are always filled
/// when `cache` is given so capture can read them.
Tensor dense_mlp_forward(const MlpParams& mlp, const Tensor& x, DenseMlpCache* cache);
Tensor dense_mlp_backward(const MlpParams& mlp, const Tensor& x, const Tensor& grad_out,
                          const DenseMlpCache& cache, MlpParams& grads);

class DenseMlpBackend : public MlpBackend {
 public:
  explicit DenseMlpBackend(const ModelWeights& weights) : weights_(weights) {}
  Tensor forward(int layer, const Tensor& x, const BatchInfo& batch,
                 std::unique_ptr<MlpCache>* cache) const override;
  Tensor backward(int layer, const Tensor& x, const Tensor& grad_out, const MlpCache& cache,
                  MlpParams& grads) const override;

 private:
  const ModelWeights& weights_;
};

struct EncoderCache;

struct CaptureRequest {
  std::vector<int> layers;
  std::span<const int> labels;  // optional, one per image
  bool include_class_token = true;
  std::vector<ActivationRecord>* out = nullptr;
};

struct EncoderOutput {
  Tensor logits;
  std::shared_ptr<EncoderCache> cache;  // null unless requested
};

/// Full encoder pass. `image_ids` defaults to 0..batch-1 when empty.
EncoderOutput encoder_forward(const ModelSpec& spec, const ModelWeights& weights, const MlpBackend& mlp,
                              const Tensor& images, std::span<const std::int64_t> image_ids,
                              bool keep_cache, const CaptureRequest* capture = nullptr);

/// Reverse pass from dL/dlogits. Non-MLP gradients land in `grads`; the MLP
/// gradients of layer l land in mlp_grads(l).
void encoder_backward(const ModelSpec& spec, const ModelWeights& weights, const MlpBackend& mlp,
                      const EncoderCache& cache, const Tensor& grad_logits, ModelWeights& grads,
                      const std::function<MlpParams&(int)>& mlp_grads);

/// Objective = scale · (ce_weight · CE(labels) + kd_weight · T² · KL(teacher ‖ student)),
/// averaged over the batch. Soft targets use temperature T.
struct LossSpec {
  double ce_weight = 1.0;
  double kd_weight = 0.0;
  double temperature = 2.0;
  double scale = 1.0;

  static LossSpec cross_entropy() { return {}; }
  static LossSpec distillation(double temperature) { return {0.0, 1.0, temperature, 1.0}; }
  /// kd_weight·KD + (1-kd_weight)·CE.
  static LossSpec combined(double kd_weight, double temperature) {
    return {1.0 - kd_weight, kd_weight, temperature, 1.0};
  }
  bool needs_teacher() const { return kd_weight != 0.0; }
};

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Loss and its gradient wrt the student logits, accumulated in double.
LossResult compute_loss(const Tensor& logits, std::span<const int> labels, const LossSpec& loss,
                        const Tensor* teacher_logits);

/// Patchified images: (batch·num_patches) × patch_dim, channel-major per patch.
Tensor patchify(const ModelSpec& spec, const Tensor& images);

Tensor forward(const ModelSpec& spec, const ModelWeights& weights, const Tensor& images);

struct CaptureResult {
  Tensor logits;
  std::vector<ActivationRecord> records;
};

CaptureResult forward_with_capture(const ModelSpec& spec, const ModelWeights& weights, const Tensor& images,
                                   const std::vector<int>& layers, std::span<const std::int64_t> image_ids = {},
                                   std::span<const int> labels = {});

struct GradientResult {
  ModelWeights grads;
  double loss = 0.0;
  Tensor logits;
};

/// Exact reverse-mode gradients of the mean batch loss.
GradientResult backward(const ModelSpec& spec, const ModelWeights& weights, const Tensor& images,
                        std::span<const int> labels, const LossSpec& loss,
                        const Tensor* teacher_logits = nullptr);

std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace moex
