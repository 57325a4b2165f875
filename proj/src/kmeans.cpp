#include <algorithm>
#include <limits>

#include "moex/clustering.hpp"
#include "moex/error.hpp"

namespace moex {

namespace {

double sq_dist(const float* a, const double* c, std::int64_t d) {
  double s = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    const double t = static_cast<double>(a[i]) - c[i];
    s += t * t;
  }
  return s;
}

}  // namespace

KMeansResult kmeans(const Tensor& points, int k, Rng& rng, int max_iter) {
  if (points.rank() != 2) throw DimensionError("k-means expects an n×d matrix");
  require_finite(points, "k-means input");
  const std::int64_t n = points.dim(0);
  const std::int64_t d = points.dim(1);
  if (k < 1 || k > n) throw ConfigError("k-means needs 1 ≤ k ≤ n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  if (max_iter < 1) throw ConfigError("k-means needs at least one iteration");
  const float* P = points.data();
  const auto K = static_cast<std::size_t>(k);
  std::vector<double> cent(K * static_cast<std::size_t>(d));
  auto set_centroid = [&](std::size_t c, std::int64_t p) {
    for (std::int64_t j = 0; j < d; ++j) cent[c * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] = P[p * d + j];
  };
  auto centroid = [&](std::size_t c) { return cent.data() + c * static_cast<std::size_t>(d); };

  // k-means++ seeding.
  std::vector<double> nearest(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  std::int64_t first = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
  set_centroid(0, first);
  chosen[static_cast<std::size_t>(first)] = 1;
  for (std::size_t c = 1; c < K; ++c) {
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      auto& v = nearest[static_cast<std::size_t>(i)];
      v = std::min(v, sq_dist(P + i * d, centroid(c - 1), d));
      total += v;
    }
    std::int64_t pick = -1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::int64_t i = 0; i < n; ++i) {
        target -= nearest[static_cast<std::size_t>(i)];
        if (target < 0.0 && nearest[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (std::int64_t i = n - 1; i >= 0; --i) {
          if (nearest[static_cast<std::size_t>(i)] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // Only duplicates remain: take the first unused point.
      for (std::int64_t i = 0; i < n && pick < 0; ++i) {
        if (!chosen[static_cast<std::size_t>(i)]) pick = i;
      }
    }
    set_centroid(c, pick);
    chosen[static_cast<std::size_t>(pick)] = 1;
  }

  KMeansResult out;
  auto& labels = out.assignment.labels;
  labels.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::int64_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(P + i * d, centroid(0), d);
      for (std::size_t c = 1; c < K; ++c) {
        const double v = sq_dist(P + i * d, centroid(c), d);
        if (v < bd) {
          bd = v;
          best = static_cast<int>(c);
        }
      }
      dist[static_cast<std::size_t>(i)] = bd;
      if (labels[static_cast<std::size_t>(i)] != best) {
        labels[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    out.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<double> sum(K * static_cast<std::size_t>(d), 0.0);
    std::vector<std::int64_t> count(K, 0);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
      ++count[c];
      for (std::int64_t j = 0; j < d; ++j) sum[c * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] += P[i * d + j];
    }
    for (std::size_t c = 0; c < K; ++c) {
      if (count[c] == 0) {
        // Empty cluster: move it onto the point farthest from its centroid.
        const auto far = std::max_element(dist.begin(), dist.end()) - dist.begin();
        set_centroid(c, far);
        dist[static_cast<std::size_t>(far)] = 0.0;
        continue;
      }
      for (std::int64_t j = 0; j < d; ++j) {
        centroid(c)[j] = sum[c * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] / static_cast<double>(count[c]);
      }
    }
  }

  out.assignment.k = k;
  out.centroids = Tensor({k, d});
  out.inertia = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    out.inertia += sq_dist(P + i * d, centroid(static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])), d);
  }
  for (std::size_t c = 0; c < K; ++c) {
    for (std::int64_t j = 0; j < d; ++j) out.centroids.at(static_cast<std::int64_t>(c), j) = static_cast<float>(centroid(c)[j]);
  }
  return out;
}

}  // namespace moex
