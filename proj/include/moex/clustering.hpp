#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moex/activations.hpp"
#include "moex/rng.hpp"
#include "moex/tensor.hpp"

namespace moex {

/// Resolved HDBSCAN parameters in absolute point counts.
struct HdbscanParams {
  int min_cluster_size = 5;
  int min_samples = 5;
  /// Pairwise distances are kept in memory when n²·4 bytes fit; larger inputs
  /// recompute distances on the fly with identical results.
  std::int64_t max_matrix_bytes = std::int64_t{3} << 30;
};

/// Euclidean HDBSCAN with excess-of-mass selection. The minimum cluster size
/// is a fraction of the clustered sample count.
struct ClusteringConfig {
  double min_cluster_size_fraction = 0.006;
  std::optional<int> min_samples;  // defaults to the derived min_cluster_size
  std::int64_t max_matrix_bytes = std::int64_t{3} << 30;

  void validate() const;
  /// Throws ConfigError when the derived size is below 2 or exceeds n.
  HdbscanParams resolve(std::int64_t n) const;
};

struct ClusterAssignment {
  std::vector<int> labels;  // -1 is noise
  int k = 0;

  std::int64_t noise_count() const;
  std::vector<std::int64_t> cluster_sizes() const;
  void validate() const;

  std::string to_json() const;
  static ClusterAssignment from_json(const std::string& text);
};

ClusterAssignment hdbscan(const Tensor& points, const HdbscanParams& params);
ClusterAssignment hdbscan(const Tensor& points, const ClusteringConfig& config);

/// Distance to the min_samples-th nearest point, the point itself included.
std::vector<float> core_distances(const Tensor& points, int min_samples);

struct MstEdge {
  int a = 0;  // a < b
  int b = 0;
  float weight = 0.0f;
};

/// Minimum spanning tree of the mutual-reachability graph
/// w(i,j) = max(core_i, core_j, |p_i - p_j|). Ties break on (weight, a, b),
/// which makes the tree unique. Edges come back sorted by that key.
std::vector<MstEdge> mutual_reachability_mst(const Tensor& points, std::span<const float> core,
                                             std::int64_t max_matrix_bytes = std::int64_t{3} << 30);

/// Float Euclidean distance with a fixed summation order; symmetric bitwise.
float euclidean(const float* a, const float* b, std::int64_t d) noexcept;

struct KMeansResult {
  ClusterAssignment assignment;
  Tensor centroids;  // k × d
  double inertia = 0.0;
  int iterations = 0;
};

/// Lloyd iterations from k-means++ seeds, at most `max_iter` rounds.
KMeansResult kmeans(const Tensor& points, int k, Rng& rng, int max_iter = 300);

/// HDBSCAN over the hidden activations y of one layer. k = 0 means the layer
/// has no experts and stays dense.
ClusterAssignment cluster_layer_activations(const LayerActivations& acts, const ClusteringConfig& config);
ClusterAssignment cluster_layer_activations(std::span<const ActivationRecord> records,
                                            const ClusteringConfig& config);

}  // namespace moex
