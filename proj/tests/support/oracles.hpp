#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moex/clustering.hpp"
#include "moex/dataset.hpp"
#include "moex/finetune.hpp"
#include "moex/moe.hpp"
#include "moex/vit.hpp"

namespace moex::testing {

/// 8×8 RGB images, 4×4 patches, e=16, two blocks, r=4, five classes.
ModelSpec tiny_spec();

/// Every tensor random, LayerNorm gains around 1.
ModelWeights random_weights(const ModelSpec& spec, std::uint64_t seed, float scale = 0.3f);
Tensor random_images(const ModelSpec& spec, int n, std::uint64_t seed);
/// random_images with uniform labels and generic class names.
Dataset random_dataset(const ModelSpec& spec, int n, std::uint64_t seed);

/// Straight-line double-precision forward of one image, written from the
/// block equations independently of the library.
/// `mlp`, when set, replaces the MLP of any block for which it returns a value;
/// it receives (layer, token, post-LayerNorm input).
using MlpOverride = std::function<std::optional<std::vector<double>>(int, int, const std::vector<double>&)>;
std::vector<double> reference_logits(const ModelSpec& spec, const ModelWeights& w, const Tensor& images, int index,
                                     const MlpOverride& mlp = {});

/// Expert `expert` of a converted layer on a double input, straight from the
/// compacted weights.
std::vector<double> reference_expert_mlp(const MoeLayer& layer, int expert, const std::vector<double>& x);

/// Cross-entropy and T²-scaled KL(teacher ‖ student) in double.
double reference_cross_entropy(const std::vector<double>& logits, int label);
double reference_distillation(const std::vector<double>& student, const std::vector<double>& teacher, double t);

/// gelu(x·W1 + b1) with hidden units outside `keep` set to zero, then ·W2 + b2,
/// accumulated in double. Empty `keep` keeps everything.
std::vector<double> reference_masked_mlp(const MlpParams& mlp, std::span<const float> x, const std::vector<int>& keep);

/// The same masked dense MLP in float: plain loops over the full hidden layer,
/// masked units contribute exact zeros.
std::vector<float> reference_masked_mlp_f32(const MlpParams& mlp, std::span<const float> x, const std::vector<int>& keep);

/// Argmax of explicitly normalized cosine, in double.
int reference_cosine_route(std::span<const float> x, const Tensor& means);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Partition equality up to renaming (noise stays noise).
bool same_partition(const std::vector<int>& a, const std::vector<int>& b);

struct HdbscanFixture {
  std::string name;
  Tensor points;
  int planted_k = 0;
  int min_cluster_size = 0;
  std::vector<int> reference;  // labels from the reference implementation
};

std::vector<std::string> hdbscan_fixture_paths();
HdbscanFixture load_hdbscan_fixture(const std::string& path);

/// Minimum spanning tree weight of the mutual-reachability graph by
/// enumerating every labelled tree (Prüfer sequences). n ≤ 9.
double brute_force_mst_weight(const Tensor& points, std::span<const float> core);

/// Random experts on random layers of `weights`; every layer listed in
/// `layers` is converted with 1..max_k experts of random neuron subsets.
std::vector<ExpertSpec> random_experts(const ModelSpec& spec, const ModelWeights& weights,
                                       const std::vector<int>& layers, int max_k, std::uint64_t seed);

/// Full-coverage single expert for each listed layer.
std::vector<ExpertSpec> full_coverage_experts(const ModelSpec& spec, const ModelWeights& weights,
                                              const std::vector<int>& layers, std::uint64_t seed);

std::string temp_path(const std::string& name);

/// JSON header text of a model or capture container.
std::string container_header(const std::string& bytes);

/// Re-encodes a container with a new JSON header. Payloads move by a
/// multiple of 64 when the header grows, and every manifest offset follows.
std::string with_container_header(const std::string& bytes, const std::string& header);

/// True when `got` is the sorted shortest descending-by-stat prefix whose
/// sum reaches p of the total (stable order on ties).
bool passes_prefix_oracle(const Tensor& stat, double p, const std::vector<int>& got);

struct FdResult {
  int samples = 0;
  int passed = 0;
  double loss_gap = 0.0;  // |double-oracle loss − reported loss|
  std::vector<std::string> failures;

  double pass_rate() const { return samples ? static_cast<double>(passed) / samples : 0.0; }
};

/// Central differences (step 1e-3) of the double-precision cross-entropy of
/// the dense model against backward(), on `samples` random coordinates.
/// Relative error ≤ 1e-2 with a 1e-6 floor on the denominator passes.
FdResult dense_fd_check(const ModelSpec& spec, ModelWeights& w, const Tensor& images, const std::vector<int>& labels,
                        int samples, std::uint64_t seed);

/// The same against moe_backward() with the routes of `g` held fixed, over
/// the coordinates of `params` (gradients in `grads`).
FdResult frozen_route_fd_check(MoeModel& m, const MoeGradients& g, const Tensor& images, const std::vector<int>& labels,
                               const LossSpec& loss, const Tensor* teacher, const std::vector<Tensor*>& params,
                               const std::vector<const Tensor*>& grads, int samples, std::uint64_t seed);

}  // namespace moex::testing
