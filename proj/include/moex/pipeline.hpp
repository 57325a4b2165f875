#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moex/activations.hpp"
#include "moex/clustering.hpp"
#include "moex/dataset.hpp"
#include "moex/extraction.hpp"
#include "moex/finetune.hpp"
#include "moex/moe.hpp"
#include "moex/train.hpp"

namespace moex {

struct DataConfig {
  std::string kind = "synth";  // synth | idx
  std::string train_images, train_labels, test_images, test_labels;
  std::int64_t train_size = 3000;  // synth only
  std::int64_t test_size = 1000;
  SynthConfig synth;
};

/// Everything one pipeline run depends on. Stage seeds are derived from
/// `seed`, so one number fixes the whole run.
struct RunConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  ModelSpec model;
  TrainConfig train;
  std::int64_t capture_images = 1480;
  std::int64_t capture_tokens = 0;  // when > 0, overrides capture_images
  CaptureConfig capture;
  ClusteringConfig clustering;
  ExtractionConfig extraction;
  RoutingMetric metric = RoutingMetric::Cosine;
  FinetuneConfig finetune;
  std::int64_t finetune_images = 0;  // 0 uses the whole training set
  std::vector<std::vector<int>> class_groups;
  std::vector<std::int64_t> stability_sizes{200, 400, 800, 1480};
  std::vector<std::uint64_t> stability_seeds{1, 2, 3};
  int export_max_patches = 16;

  /// Cross-field checks, including that the captured token count can hold
  /// one minimum-size cluster.
  void validate() const;
  std::int64_t capture_image_count() const;
  std::int64_t capture_token_count() const;
  /// Layers captured, resolving an empty list to every block.
  std::vector<int> capture_layers() const;
  /// Seeds of the individual stages.
  std::uint64_t stage_seed(const std::string& stage) const;
};

/// Parses "key = value" lines with dotted keys; '#' starts a comment.
/// Unknown keys and malformed values are ConfigErrors.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::string& path);
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
/// Every key with its current value, parseable by parse_run_config.
std::string to_config_text(const RunConfig& config);
/// "2-3", "0,2,3" or "all"; "all" gives the empty list, which means every block.
std::vector<int> parse_layer_range(const std::string& text, int num_layers);

struct Datasets {
  Dataset train;
  Dataset test;
};

Datasets load_datasets(const RunConfig& config);

ModelWeights run_train(const RunConfig& config, const Dataset& train,
                       const std::function<void(const EpochStats&)>& on_epoch = {});

/// Training-set indices of the capture images, ascending.
std::vector<std::int64_t> capture_indices(const RunConfig& config, std::int64_t pool_size);

std::vector<LayerActivations> run_capture(const RunConfig& config, const ModelWeights& weights, const Dataset& train);

struct LayerClustering {
  int layer = 0;
  HdbscanParams params;
  ClusterAssignment assignment;
};

std::vector<LayerClustering> cluster_layers(const std::vector<LayerActivations>& acts, const ClusteringConfig& config);

/// Every point gets a uniform label in [0, k); used by the random-clusters ablation.
ClusterAssignment random_assignment(std::int64_t n, int k, Rng& rng);

std::vector<ExpertSpec> extract_experts(const std::vector<LayerActivations>& acts,
                                        const std::vector<LayerClustering>& clusters,
                                        const ExtractionConfig& config);

struct Report {
  std::string preset;
  std::uint64_t seed = 0;
  double dense_top1 = 0.0;
  double acc_retention = 0.0;  // Top-1 straight after extraction
  double top1 = 0.0;           // Top-1 after fine-tuning
  double macs_reduction = 0.0;
  double params_reduction = 0.0;
  std::int64_t dense_macs = 0;
  double moe_macs = 0.0;
  std::int64_t dense_params = 0;
  std::int64_t moe_params = 0;
  std::int64_t capture_tokens = 0;
  std::vector<int> experts_per_layer;
  std::vector<double> finetune_top1;  // per epoch

  /// Numbers are written with round-trip precision.
  std::string to_json() const;
  static Report from_json(const std::string& text);
  bool operator==(const Report&) const = default;
};

/// Fills the cost fields from a model and the routing trace of `eval`.
void fill_costs(Report& report, const MoeModel& model, const RoutingTrace& trace);

enum class AblationPreset { RandomEverything, Hdbscan, Variance, Full };

const char* to_string(AblationPreset p) noexcept;
AblationPreset parse_preset(const std::string& s);
std::vector<AblationPreset> all_presets();

/// Stage results kept in memory by run_experiment.
struct ExperimentArtifacts {
  ModelWeights dense;
  std::vector<LayerActivations> activations;
  std::vector<LayerClustering> clusters;
  MoeModel extracted;
  MoeModel finetuned;
};

struct ExperimentHooks {
  std::function<void(const std::string&)> log;
  std::function<void(const FinetuneEpoch&)> on_finetune_epoch;
};

/// train -> capture -> cluster -> extract -> assemble -> evaluate -> finetune.
Report run_experiment(const RunConfig& config, const ExperimentHooks& hooks = {},
                      ExperimentArtifacts* artifacts = nullptr);

/// Builds, evaluates and fine-tunes one ablation preset from a shared trained
/// model and shared HDBSCAN results. Random clusters keep each layer's k.
Report run_preset(const RunConfig& config, AblationPreset preset, const Datasets& data, const ModelWeights& dense,
                  double dense_top1, const std::vector<LayerActivations>& acts,
                  const std::vector<LayerClustering>& hdbscan_clusters, const ExperimentHooks& hooks = {},
                  MoeModel* finetuned = nullptr);

}  // namespace moex
