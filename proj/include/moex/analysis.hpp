#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moex/activations.hpp"
#include "moex/clustering.hpp"
#include "moex/dataset.hpp"
#include "moex/extraction.hpp"
#include "moex/moe.hpp"

namespace moex {

/// Token counts of one layer, overall and per class.
struct RoutingStats {
  int layer = 0;
  std::vector<std::int64_t> counts;                         // per expert
  std::map<int, std::vector<std::int64_t>> class_counts;    // class -> per expert

  int num_experts() const { return static_cast<int>(counts.size()); }
  std::int64_t total() const;
  std::vector<double> fractions() const;
  /// Throws ValidationError for a class absent from the stats.
  std::vector<double> class_fractions(int cls) const;
};

struct RoutingFilter {
  /// Restricts the tally to these labels; empty means all classes.
  std::vector<int> classes;
  /// Class ids must lie in [0, num_classes); -1 accepts any id seen in the trace.
  int num_classes = -1;
  /// Per-layer expert counts (e.g. from expert_count_table); layers missing
  /// here size their vectors from the largest expert id in the trace.
  std::vector<int> experts_per_layer;
};

/// One RoutingStats per layer present in the trace, ascending.
std::vector<RoutingStats> routing_distribution(const RoutingTrace& trace, const RoutingFilter& filter = {});

/// Fractions sorted descending.
std::vector<double> load_balance_curve(const std::vector<double>& fractions);
std::vector<double> load_balance_curve(const RoutingStats& stats);

/// Total-variation distance between two classes' routing fractions, in [0, 1].
double class_overlap(const RoutingStats& stats, int class_a, int class_b);

/// Mean routing fractions of a group of classes.
std::vector<double> group_fractions(const RoutingStats& stats, const std::vector<int>& classes);

struct SimilarityMatrix {
  int layer = 0;
  int k = 0;
  std::vector<double> values;  // k × k row-major

  double at(int i, int j) const { return values[static_cast<std::size_t>(i * k + j)]; }
};

/// Pairwise dot products of the unit routing means of a converted layer.
SimilarityMatrix similarity_matrix(const MoeModel& model, int layer);

/// Experts per encoder block, 0 for dense blocks.
std::vector<int> expert_count_table(const MoeModel& model);

struct StabilityConfig {
  std::vector<std::int64_t> sample_sizes;  // images captured per run
  std::vector<std::uint64_t> seeds;
  CaptureConfig capture;
  ClusteringConfig clustering;
  ExtractionConfig extraction;
  RoutingMetric metric = RoutingMetric::Cosine;
};

struct StabilityRun {
  std::int64_t sample_size = 0;
  std::uint64_t seed = 0;
  double top1 = 0.0;
  std::vector<int> experts_per_layer;
};

struct StabilitySummary {
  std::int64_t sample_size = 0;
  double top1_mean = 0.0;
  double top1_std = 0.0;  // population σ
  std::vector<double> experts_mean;
  std::vector<double> experts_std;
};

struct StabilityResult {
  std::vector<StabilityRun> runs;
  std::vector<StabilitySummary> summaries;  // one per sample size, input order

  /// size,seed,top1,k_layer0,k_layer1,…
  std::string to_csv() const;
};

/// Capture -> cluster -> extract -> evaluate for every (size, seed). Each run
/// draws its capture images from `pool` with Rng(seed).
StabilityResult stability_experiment(const ModelSpec& spec, const ModelWeights& weights, const Dataset& pool,
                                     const Dataset& eval, const StabilityConfig& config);

struct ExportedPatch {
  std::int64_t image_id = 0;
  int token_index = 0;
  std::filesystem::path path;
};

/// Writes up to `max_patches` PNG crops of the image patches whose tokens were
/// routed to `expert` at `layer`, in trace order, named
/// <layer>_<expert>_<image>_<token>.png. Class tokens have no patch.
std::vector<ExportedPatch> export_expert_patches(const MoeModel& model, const Dataset& data, int layer, int expert,
                                                 int max_patches, const std::filesystem::path& out_dir);

/// RGB or grayscale 8-bit PNG from [C,H,W] pixels in [0,1].
std::string encode_png(const Tensor& image);

// CSV exports.
/// layer,class,expert,count,fraction; class "all" holds the overall tally.
std::string routing_stats_csv(const std::vector<RoutingStats>& stats);
std::string similarity_csv(const SimilarityMatrix& m);
/// layer,k
std::string expert_counts_csv(const std::vector<int>& counts);

}  // namespace moex
