#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moex/activations.hpp"
#include "moex/clustering.hpp"
#include "moex/tensor.hpp"

namespace moex {

enum class SelectionCriterion { Variance, Magnitude, Random };

const char* to_string(SelectionCriterion c) noexcept;
SelectionCriterion parse_criterion(const std::string& s);

/// One expert: the hidden neurons it keeps and the mean input that routes to it.
struct ExpertSpec {
  int layer = 0;
  int expert_id = 0;
  std::vector<int> neuron_indices;  // strictly increasing
  Tensor mu;                        // e, unit norm
  Tensor raw_mean;                  // e, mean input before normalization
  std::int64_t member_count = 0;

  void validate(std::int64_t hidden, std::int64_t embed) const;
};

struct ExtractionConfig {
  double extraction_percentage = 0.8;
  SelectionCriterion criterion = SelectionCriterion::Variance;
  std::uint64_t seed = 0;  // random criterion only

  void validate() const;
};

/// Population variance of y over the members of one cluster.
Tensor cluster_variances(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id);
/// |mean y| over the members of one cluster.
Tensor cluster_magnitudes(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id);

/// Smallest descending-order prefix whose cumulative sum reaches p·sum(stat),
/// ties broken toward the lower index. Returned sorted ascending.
std::vector<int> select_neurons(const Tensor& stat, double p);

/// Mean of member x vectors before normalization.
Tensor raw_mean_input(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id);
/// Unit-normalized mean input; norms below 1e-12 are degenerate.
Tensor mean_input(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id);

/// One ExpertSpec per cluster of the layer.
std::vector<ExpertSpec> extract_layer(const LayerActivations& acts, const ClusterAssignment& assignment,
                                      const ExtractionConfig& config);

// Record-list overloads for callers holding ActivationRecords.
Tensor cluster_variances(std::span<const ActivationRecord> records, const ClusterAssignment& assignment, int cluster_id);
Tensor mean_input(std::span<const ActivationRecord> records, const ClusterAssignment& assignment, int cluster_id);
std::vector<ExpertSpec> extract_layer(std::span<const ActivationRecord> records, const ClusterAssignment& assignment,
                                      const ExtractionConfig& config);

}  // namespace moex
