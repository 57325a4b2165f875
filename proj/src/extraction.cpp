#include "moex/extraction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moex/error.hpp"
#include "moex/rng.hpp"

namespace moex {

const char* to_string(SelectionCriterion c) noexcept {
  switch (c) {
    case SelectionCriterion::Variance: return "variance";
    case SelectionCriterion::Magnitude: return "magnitude";
    case SelectionCriterion::Random: return "random";
  }
  return "unknown";
}

SelectionCriterion parse_criterion(const std::string& s) {
  if (s == "variance") return SelectionCriterion::Variance;
  if (s == "magnitude") return SelectionCriterion::Magnitude;
  if (s == "random") return SelectionCriterion::Random;
  throw ConfigError("unknown selection criterion '" + s + "'");
}

void ExpertSpec::validate(std::int64_t hidden, std::int64_t embed) const {
  const std::string who = "expert " + std::to_string(expert_id) + " of layer " + std::to_string(layer);
  if (neuron_indices.empty()) throw ValidationError(who + " has no neurons");
  for (std::size_t i = 0; i < neuron_indices.size(); ++i) {
    const int v = neuron_indices[i];
    if (v < 0 || v >= hidden) throw ValidationError(who + " has neuron index " + std::to_string(v) + " out of range");
    if (i > 0 && neuron_indices[i - 1] >= v) throw ValidationError(who + " neuron indices are not strictly increasing");
  }
  if (mu.numel() != embed) throw DimensionError(who + " mean has " + std::to_string(mu.numel()) + " entries");
  if (!raw_mean.empty() && raw_mean.numel() != embed) throw DimensionError(who + " raw mean has wrong width");
  if (std::abs(l2_norm(mu.values()) - 1.0) > 1e-5) throw ValidationError(who + " mean is not unit length");
}

void ExtractionConfig::validate() const {
  if (!(extraction_percentage > 0.0 && extraction_percentage <= 1.0)) {
    throw ConfigError("extraction percentage must lie in (0, 1]");
  }
}

namespace {

std::vector<std::int64_t> members(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id) {
  acts.validate();
  if (static_cast<std::int64_t>(assignment.labels.size()) != acts.size()) {
    throw DimensionError("assignment has " + std::to_string(assignment.labels.size()) + " labels for " +
                         std::to_string(acts.size()) + " tokens");
  }
  if (cluster_id < 0 || cluster_id >= assignment.k) {
    throw ValidationError("cluster " + std::to_string(cluster_id) + " does not exist");
  }
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < assignment.labels.size(); ++i) {
    if (assignment.labels[i] == cluster_id) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

std::vector<double> column_mean(const Tensor& m, const std::vector<std::int64_t>& rows) {
  std::vector<double> mean(static_cast<std::size_t>(m.cols()), 0.0);
  for (auto r : rows) {
    auto v = m.row(r);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += v[j];
  }
  for (auto& v : mean) v /= static_cast<double>(rows.size());
  return mean;
}

}  // namespace

Tensor cluster_variances(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id) {
  const auto rows = members(acts, assignment, cluster_id);
  if (rows.size() < 2) {
    throw DegenerateStatisticsError("cluster " + std::to_string(cluster_id) + " has " + std::to_string(rows.size()) +
                                    " member(s); variance needs at least 2");
  }
  const auto mean = column_mean(acts.y, rows);
  std::vector<double> var(mean.size(), 0.0);
  for (auto r : rows) {
    auto v = acts.y.row(r);
    for (std::size_t j = 0; j < var.size(); ++j) {
      const double t = v[j] - mean[j];
      var[j] += t * t;
    }
  }
  Tensor out({static_cast<std::int64_t>(var.size())});
  for (std::size_t j = 0; j < var.size(); ++j) {
    out[static_cast<std::int64_t>(j)] = static_cast<float>(var[j] / static_cast<double>(rows.size()));
  }
  return out;
}

Tensor cluster_magnitudes(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id) {
  const auto rows = members(acts, assignment, cluster_id);
  if (rows.empty()) throw DegenerateStatisticsError("cluster " + std::to_string(cluster_id) + " is empty");
  const auto mean = column_mean(acts.y, rows);
  Tensor out({static_cast<std::int64_t>(mean.size())});
  for (std::size_t j = 0; j < mean.size(); ++j) out[static_cast<std::int64_t>(j)] = static_cast<float>(std::abs(mean[j]));
  return out;
}

std::vector<int> select_neurons(const Tensor& stat, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("extraction percentage must lie in (0, 1]");
  const auto n = stat.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!(stat[i] >= 0.0f) || !std::isfinite(stat[i])) {
      throw ValidationError("selection statistic must be finite and non-negative");
    }
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return stat[a] > stat[b]; });
  // Summing in the sorted order makes the p = 1 prefix end at the last positive entry.
  double total = 0.0;
  for (int i : order) total += stat[i];
  if (!(total > 0.0)) throw DegenerateStatisticsError("selection statistic is all zero");
  const double target = p * total;
  std::vector<int> out;
  double cum = 0.0;
  for (int i : order) {
    out.push_back(i);
    cum += stat[i];
    if (cum >= target) break;
  }
  std::sort(out.begin(), out.end());
  return out;
}

Tensor raw_mean_input(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id) {
  const auto rows = members(acts, assignment, cluster_id);
  if (rows.empty()) throw DegenerateStatisticsError("cluster " + std::to_string(cluster_id) + " is empty");
  const auto mean = column_mean(acts.x, rows);
  Tensor out({static_cast<std::int64_t>(mean.size())});
  for (std::size_t j = 0; j < mean.size(); ++j) out[static_cast<std::int64_t>(j)] = static_cast<float>(mean[j]);
  return out;
}

Tensor mean_input(const LayerActivations& acts, const ClusterAssignment& assignment, int cluster_id) {
  const auto rows = members(acts, assignment, cluster_id);
  if (rows.empty()) throw DegenerateStatisticsError("cluster " + std::to_string(cluster_id) + " is empty");
  const auto mean = column_mean(acts.x, rows);
  double norm = 0.0;
  for (double v : mean) norm += v * v;
  norm = std::sqrt(norm);
  if (norm < 1e-12) {
    throw DegenerateStatisticsError("mean input of cluster " + std::to_string(cluster_id) + " has norm " +
                                    std::to_string(norm));
  }
  Tensor out({static_cast<std::int64_t>(mean.size())});
  for (std::size_t j = 0; j < mean.size(); ++j) out[static_cast<std::int64_t>(j)] = static_cast<float>(mean[j] / norm);
  return out;
}

std::vector<ExpertSpec> extract_layer(const LayerActivations& acts, const ClusterAssignment& assignment,
                                      const ExtractionConfig& config) {
  config.validate();
  if (assignment.k < 1) throw ValidationError("layer " + std::to_string(acts.layer) + " has no clusters to extract");
  std::vector<ExpertSpec> out;
  for (int c = 0; c < assignment.k; ++c) {
    ExpertSpec s;
    s.layer = acts.layer;
    s.expert_id = c;
    const Tensor var = cluster_variances(acts, assignment, c);
    switch (config.criterion) {
      case SelectionCriterion::Variance:
        s.neuron_indices = select_neurons(var, config.extraction_percentage);
        break;
      case SelectionCriterion::Magnitude:
        s.neuron_indices = select_neurons(cluster_magnitudes(acts, assignment, c), config.extraction_percentage);
        break;
      case SelectionCriterion::Random: {
        // Same size the variance rule would pick, so only the choice differs.
        const auto count = static_cast<int>(select_neurons(var, config.extraction_percentage).size());
        Rng rng(hash_combine({config.seed, static_cast<std::uint64_t>(acts.layer), static_cast<std::uint64_t>(c)}));
        s.neuron_indices = rng.sample_without_replacement(static_cast<int>(var.numel()), count);
        break;
      }
    }
    s.mu = mean_input(acts, assignment, c);
    s.raw_mean = raw_mean_input(acts, assignment, c);
    s.member_count = static_cast<std::int64_t>(std::count(assignment.labels.begin(), assignment.labels.end(), c));
    out.push_back(std::move(s));
  }
  return out;
}

Tensor cluster_variances(std::span<const ActivationRecord> records, const ClusterAssignment& assignment,
                         int cluster_id) {
  return cluster_variances(pack_records(records), assignment, cluster_id);
}

Tensor mean_input(std::span<const ActivationRecord> records, const ClusterAssignment& assignment, int cluster_id) {
  return mean_input(pack_records(records), assignment, cluster_id);
}

std::vector<ExpertSpec> extract_layer(std::span<const ActivationRecord> records, const ClusterAssignment& assignment,
                                      const ExtractionConfig& config) {
  return extract_layer(pack_records(records), assignment, config);
}

}  // namespace moex
