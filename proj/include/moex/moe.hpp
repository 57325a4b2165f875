#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moex/extraction.hpp"
#include "moex/vit.hpp"

namespace moex {

enum class RoutingMetric { Cosine, Euclidean, Random };

const char* to_string(RoutingMetric m) noexcept;
RoutingMetric parse_metric(const std::string& s);

/// A converted MLP: the union of all experts' neurons kept in compacted
/// weights, experts as index lists into that compacted space.
struct MoeLayer {
  int layer = 0;
  std::int64_t original_hidden = 0;
  std::vector<int> kept_indices;  // sorted, into the original hidden units
  MlpParams compact;              // w1 e×|kept|, b1, w2 |kept|×e, b2
  std::vector<std::vector<int>> experts;  // remapped, each sorted
  std::vector<int> expert_ids;
  Tensor means;      // k × e, unit rows
  Tensor raw_means;  // k × e
  std::vector<std::int64_t> member_counts;

  int num_experts() const { return static_cast<int>(experts.size()); }
  std::int64_t kept() const { return static_cast<std::int64_t>(kept_indices.size()); }
  void validate(std::int64_t embed) const;
};

/// Dense model with some MLPs replaced. Converted layers carry an empty
/// dense MLP in `weights`.
struct MoeModel {
  ModelSpec spec;
  ModelWeights weights;
  std::vector<std::optional<MoeLayer>> layers;  // one slot per encoder block
  RoutingMetric metric = RoutingMetric::Cosine;
  std::uint64_t routing_seed = 0;  // random routing only

  static MoeModel dense(const ModelSpec& spec, const ModelWeights& weights);

  bool converted(int layer) const;
  std::vector<int> converted_layers() const;
  void validate() const;
  bool identical(const MoeModel& other) const;
};

/// Builds the MoE model. Layers without experts stay dense.
MoeModel assemble(const ModelSpec& spec, const ModelWeights& weights, const std::vector<ExpertSpec>& experts,
                  RoutingMetric metric = RoutingMetric::Cosine, std::uint64_t routing_seed = 0);

/// Top-1 expert for one token. Cosine uses argmax μ·x over unit means;
/// Euclidean uses argmin ‖x − m‖ over raw means. Ties go to the lower index.
int route(std::span<const float> x, const Tensor& means, RoutingMetric metric);
int route(std::span<const float> x, const MoeLayer& layer, RoutingMetric metric);
/// Keyed draw used for the random-routing ablation.
int random_route(std::uint64_t seed, int layer, std::int64_t image_id, int token_index, int num_experts);

/// Routed expert MLP for one token.
Tensor moe_mlp_forward(const MoeLayer& layer, std::span<const float> x, RoutingMetric metric = RoutingMetric::Cosine);
/// Same, with the expert chosen by the caller.
Tensor expert_forward(const MoeLayer& layer, int expert, std::span<const float> x);

struct RouteEvent {
  int layer = 0;
  int token_index = 0;
  std::int64_t image_id = 0;
  int class_label = -1;
  int expert = 0;
};

struct RoutingTrace {
  std::vector<RouteEvent> events;

  /// layer,token_index,image_id,class_label,expert_id
  std::string to_csv() const;
  static RoutingTrace from_csv(const std::string& text);
};

/// Per layer and expert: sum of unit-normalized routed inputs and their count.
struct RouterInputs {
  std::vector<std::vector<double>> sums;  // [layer][expert·e + i]
  std::vector<std::vector<std::int64_t>> counts;
};

/// Optional per-forward hooks of the MoE backend.
struct MoeForwardOptions {
  RoutingTrace* trace = nullptr;
  /// forced_routes[l][row] fixes the expert of each MLP input row of layer l
  /// (empty vectors leave routing on).
  const std::vector<std::vector<int>>* forced_routes = nullptr;
  /// When set, receives the routes used per layer and row.
  std::vector<std::vector<int>>* routes_out = nullptr;
  RouterInputs* router_inputs = nullptr;
};

class MoeMlpBackend : public MlpBackend {
 public:
  MoeMlpBackend(const MoeModel& model, MoeForwardOptions options = {});
  Tensor forward(int layer, const Tensor& x, const BatchInfo& batch, std::unique_ptr<MlpCache>* cache) const override;
  Tensor backward(int layer, const Tensor& x, const Tensor& grad_out, const MlpCache& cache,
                  MlpParams& grads) const override;

 private:
  const MoeModel& model_;
  MoeForwardOptions options_;
};

Tensor moe_forward(const MoeModel& model, const Tensor& images, std::span<const std::int64_t> image_ids = {},
                   const MoeForwardOptions& options = {});

struct LayerCost {
  int layer = 0;
  bool converted = false;
  int experts = 0;
  std::int64_t dense_mlp_macs_per_token = 0;
  std::int64_t routing_macs_per_token = 0;
  std::int64_t worst_expert_macs_per_token = 0;
  double expected_expert_macs_per_token = 0.0;
  std::int64_t dense_mlp_params = 0;
  std::int64_t moe_mlp_params = 0;  // compacted weights plus routing means
};

/// Analytic per-image costs. One multiply-accumulate is one MAC; LayerNorm,
/// GELU and softmax are not counted.
struct CostReport {
  std::int64_t dense_macs = 0;
  double moe_macs = 0.0;  // expected under the routing distribution
  std::int64_t moe_macs_worst = 0;
  std::int64_t dense_params = 0;
  std::int64_t moe_params = 0;
  std::int64_t routing_overhead_macs = 0;
  std::vector<LayerCost> layers;

  double macs_reduction() const;
  double params_reduction() const;
};

/// Per-layer expert fractions; layers not present fall back to member counts.
using RoutingDistribution = std::vector<std::vector<double>>;

CostReport count_costs(const ModelSpec& spec);
CostReport count_costs(const MoeModel& model, const RoutingDistribution* distribution = nullptr,
                       bool include_routing_params = true);

/// Empirical per-layer expert fractions of a trace.
RoutingDistribution routing_distribution_of(const MoeModel& model, const RoutingTrace& trace);

}  // namespace moex
