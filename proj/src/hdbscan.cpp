#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <numeric>
#include <tuple>

#include <nlohmann/json.hpp>

#include "moex/clustering.hpp"
#include "moex/error.hpp"
#include "moex/parallel.hpp"

namespace moex {

float euclidean(const float* a, const float* b, std::int64_t d) noexcept {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::int64_t i = 0;
  for (; i + 8 <= d; i += 8) {
    for (int j = 0; j < 8; ++j) {
      const float t = a[i + j] - b[i + j];
      acc[j] += t * t;
    }
  }
  float tail = 0.0f;
  for (; i < d; ++i) {
    const float t = a[i] - b[i];
    tail += t * t;
  }
  const float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  return std::sqrt(s + tail);
}

// ---------------------------------------------------------------------------
// Config and assignment

void ClusteringConfig::validate() const {
  if (!(min_cluster_size_fraction > 0.0 && min_cluster_size_fraction < 1.0)) {
    throw ConfigError("min_cluster_size_fraction must lie in (0, 1)");
  }
  if (min_samples && *min_samples < 1) throw ConfigError("min_samples must be at least 1");
}

HdbscanParams ClusteringConfig::resolve(std::int64_t n) const {
  validate();
  const auto mcs = static_cast<std::int64_t>(std::llround(min_cluster_size_fraction * static_cast<double>(n)));
  if (mcs < 2) {
    throw ConfigError("min_cluster_size = round(" + std::to_string(min_cluster_size_fraction) + " * " +
                      std::to_string(n) + ") = " + std::to_string(mcs) + " is below 2");
  }
  if (n < mcs) {
    throw ConfigError("sample holds " + std::to_string(n) + " tokens, fewer than min_cluster_size " +
                      std::to_string(mcs));
  }
  HdbscanParams p;
  p.min_cluster_size = static_cast<int>(mcs);
  p.min_samples = min_samples ? *min_samples : p.min_cluster_size;
  p.max_matrix_bytes = max_matrix_bytes;
  return p;
}

std::int64_t ClusterAssignment::noise_count() const {
  return std::count(labels.begin(), labels.end(), -1);
}

std::vector<std::int64_t> ClusterAssignment::cluster_sizes() const {
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(k), 0);
  for (int l : labels) {
    if (l >= 0) ++sizes[static_cast<std::size_t>(l)];
  }
  return sizes;
}

void ClusterAssignment::validate() const {
  if (k < 0) throw ValidationError("negative cluster count");
  for (int l : labels) {
    if (l < -1 || l >= k) throw ValidationError("cluster label " + std::to_string(l) + " outside [-1, k)");
  }
}

std::string ClusterAssignment::to_json() const {
  nlohmann::json j;
  j["k"] = k;
  j["labels"] = labels;
  return j.dump();
}

ClusterAssignment ClusterAssignment::from_json(const std::string& text) {
  ClusterAssignment a;
  try {
    auto j = nlohmann::json::parse(text);
    a.k = j.at("k").get<int>();
    a.labels = j.at("labels").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatFault::BadHeader, std::string("cluster assignment JSON: ") + e.what());
  }
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// Distances

namespace {

constexpr std::int64_t kRowBlock = 32;
constexpr std::int64_t kColBlock = 256;

/// Full symmetric n×n distance matrix; each pair is computed once.
std::unique_ptr<float[]> distance_matrix(const Tensor& points) {
  const std::int64_t n = points.dim(0);
  const std::int64_t d = points.dim(1);
  std::unique_ptr<float[]> dist(new float[static_cast<std::size_t>(n * n)]);
  float* D = dist.get();
  const float* P = points.data();
  parallel_for(n, kRowBlock, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t j0 = i0; j0 < n; j0 += kColBlock) {
      const std::int64_t j1 = std::min(n, j0 + kColBlock);
      for (std::int64_t i = i0; i < i1; ++i) {
        for (std::int64_t j = std::max(j0, i + 1); j < j1; ++j) D[i * n + j] = euclidean(P + i * d, P + j * d, d);
      }
    }
  });
  // Mirror the upper triangle.
  parallel_for(n, kRowBlock, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      D[i * n + i] = 0.0f;
      for (std::int64_t j = 0; j < i; ++j) D[i * n + j] = D[j * n + i];
    }
  });
  return dist;
}

bool fits(std::int64_t n, std::int64_t budget) {
  return n > 0 && static_cast<double>(n) * static_cast<double>(n) * sizeof(float) <= static_cast<double>(budget);
}

std::vector<float> core_from_rows(std::int64_t n, int min_samples,
                                  const std::function<void(std::int64_t, float*)>& fill_row) {
  std::vector<float> core(static_cast<std::size_t>(n));
  const auto kth = static_cast<std::int64_t>(std::min<std::int64_t>(min_samples, n) - 1);
  parallel_for(n, kRowBlock, [&](std::int64_t i0, std::int64_t i1) {
    std::vector<float> row(static_cast<std::size_t>(n));
    for (std::int64_t i = i0; i < i1; ++i) {
      fill_row(i, row.data());
      std::nth_element(row.begin(), row.begin() + kth, row.end());
      core[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(kth)];
    }
  });
  return core;
}

std::vector<float> core_distances_impl(const Tensor& points, int min_samples, const float* D) {
  const std::int64_t n = points.dim(0);
  const std::int64_t d = points.dim(1);
  if (D) {
    return core_from_rows(n, min_samples, [&](std::int64_t i, float* row) { std::copy_n(D + i * n, n, row); });
  }
  const float* P = points.data();
  return core_from_rows(n, min_samples, [&](std::int64_t i, float* row) {
    for (std::int64_t j = 0; j < n; ++j) row[j] = i == j ? 0.0f : euclidean(P + i * d, P + j * d, d);
  });
}

using EdgeKey = std::tuple<float, int, int>;

EdgeKey key_of(float w, int u, int v) { return {w, std::min(u, v), std::max(u, v)}; }

/// Prim's algorithm on the dense mutual-reachability graph. Distances come
/// from `D` when it is present and are recomputed per step otherwise.
std::vector<MstEdge> prim(std::int64_t n, std::span<const float> core, const float* D, const Tensor& points) {
  std::vector<MstEdge> edges;
  if (n <= 1) return edges;
  edges.reserve(static_cast<std::size_t>(n - 1));
  const std::int64_t d = points.dim(1);
  const float* P = points.data();
  const float inf = std::numeric_limits<float>::infinity();

  std::vector<int> outside(static_cast<std::size_t>(n - 1));
  std::iota(outside.begin(), outside.end(), 1);
  std::vector<float> best_w(static_cast<std::size_t>(n), inf);
  std::vector<int> best_from(static_cast<std::size_t>(n), -1);
  std::vector<float> scratch(static_cast<std::size_t>(n));

  int v = 0;
  while (!outside.empty()) {
    const auto m = static_cast<std::int64_t>(outside.size());
    const float cv = core[static_cast<std::size_t>(v)];
    if (D) {
      const float* row = D + static_cast<std::int64_t>(v) * n;
      for (std::int64_t t = 0; t < m; ++t) scratch[static_cast<std::size_t>(t)] = row[outside[static_cast<std::size_t>(t)]];
    } else {
      parallel_for(m, 1024, [&](std::int64_t t0, std::int64_t t1) {
        for (std::int64_t t = t0; t < t1; ++t) {
          scratch[static_cast<std::size_t>(t)] =
              euclidean(P + static_cast<std::int64_t>(v) * d, P + static_cast<std::int64_t>(outside[static_cast<std::size_t>(t)]) * d, d);
        }
      });
    }
    std::int64_t pick = 0;
    EdgeKey pick_key{inf, std::numeric_limits<int>::max(), std::numeric_limits<int>::max()};
    for (std::int64_t t = 0; t < m; ++t) {
      const int u = outside[static_cast<std::size_t>(t)];
      const auto ui = static_cast<std::size_t>(u);
      const float w = std::max({cv, core[ui], scratch[static_cast<std::size_t>(t)]});
      const EdgeKey cand = key_of(w, u, v);
      if (best_from[ui] < 0 || cand < key_of(best_w[ui], u, best_from[ui])) {
        best_w[ui] = w;
        best_from[ui] = v;
      }
      const EdgeKey cur = key_of(best_w[ui], u, best_from[ui]);
      if (cur < pick_key) {
        pick_key = cur;
        pick = t;
      }
    }
    const int u = outside[static_cast<std::size_t>(pick)];
    edges.push_back({std::min(u, best_from[static_cast<std::size_t>(u)]), std::max(u, best_from[static_cast<std::size_t>(u)]),
                     best_w[static_cast<std::size_t>(u)]});
    outside[static_cast<std::size_t>(pick)] = outside.back();
    outside.pop_back();
    v = u;
  }
  std::sort(edges.begin(), edges.end(), [](const MstEdge& x, const MstEdge& y) {
    return std::tie(x.weight, x.a, x.b) < std::tie(y.weight, y.a, y.b);
  });
  return edges;
}

void check_points(const Tensor& points) {
  if (points.rank() != 2) throw DimensionError("clustering expects an n×d matrix");
  if (points.dim(1) < 1) throw DimensionError("clustering needs d ≥ 1");
  require_finite(points, "clustering input");
}

// ---------------------------------------------------------------------------
// Hierarchy

struct Condensed {
  int parent;
  int child;  // < n: point, otherwise cluster id
  double lambda;
  std::int64_t size;
};

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  int find(int x) {
    while (parent_[static_cast<std::size_t>(x)] != x) {
      parent_[static_cast<std::size_t>(x)] = parent_[static_cast<std::size_t>(parent_[static_cast<std::size_t>(x)])];
      x = parent_[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void attach(int child_root, int parent_root) { parent_[static_cast<std::size_t>(child_root)] = parent_root; }

 private:
  std::vector<int> parent_;
};

struct Dendrogram {
  // Internal node n + i merges left[i] and right[i] at dist[i].
  std::vector<int> left, right;
  std::vector<double> dist;
  std::vector<std::int64_t> size;
};

Dendrogram single_linkage(int n, const std::vector<MstEdge>& edges) {
  Dendrogram t;
  const auto m = edges.size();
  t.left.resize(m);
  t.right.resize(m);
  t.dist.resize(m);
  t.size.resize(m);
  // Roots of the union-find forest are always dendrogram node ids.
  UnionFind uf(static_cast<std::size_t>(2 * n));
  auto node_size = [&](int node) -> std::int64_t { return node < n ? 1 : t.size[static_cast<std::size_t>(node - n)]; };
  for (std::size_t i = 0; i < m; ++i) {
    const int ra = uf.find(edges[i].a);
    const int rb = uf.find(edges[i].b);
    t.left[i] = ra;
    t.right[i] = rb;
    t.dist[i] = edges[i].weight;
    t.size[i] = node_size(ra) + node_size(rb);
    const int merged = n + static_cast<int>(i);
    uf.attach(ra, merged);
    uf.attach(rb, merged);
  }
  return t;
}

std::vector<Condensed> condense(int n, const Dendrogram& t, int min_cluster_size) {
  std::vector<Condensed> out;
  const int root = 2 * n - 2;
  std::vector<int> relabel(static_cast<std::size_t>(2 * n - 1), -1);
  int next_label = n + 1;
  relabel[static_cast<std::size_t>(root)] = n;

  auto size_of = [&](int node) -> std::int64_t { return node < n ? 1 : t.size[static_cast<std::size_t>(node - n)]; };
  auto fall_out = [&](int node, int parent_label, double lambda) {
    std::vector<int> stack{node};
    while (!stack.empty()) {
      const int x = stack.back();
      stack.pop_back();
      if (x < n) {
        out.push_back({parent_label, x, lambda, 1});
      } else {
        stack.push_back(t.right[static_cast<std::size_t>(x - n)]);
        stack.push_back(t.left[static_cast<std::size_t>(x - n)]);
      }
    }
  };

  std::deque<int> queue{root};
  while (!queue.empty()) {
    const int node = queue.front();
    queue.pop_front();
    const auto i = static_cast<std::size_t>(node - n);
    const int l = t.left[i];
    const int r = t.right[i];
    const double dist = t.dist[i];
    const double lambda = dist > 0.0 ? 1.0 / dist : std::numeric_limits<double>::infinity();
    const int label = relabel[static_cast<std::size_t>(node)];
    const auto lc = size_of(l);
    const auto rc = size_of(r);
    const bool l_big = lc >= min_cluster_size;
    const bool r_big = rc >= min_cluster_size;
    if (l_big && r_big) {
      for (int c : {l, r}) {
        relabel[static_cast<std::size_t>(c)] = next_label++;
        out.push_back({label, relabel[static_cast<std::size_t>(c)], lambda, size_of(c)});
        if (c >= n) queue.push_back(c);
      }
    } else if (!l_big && !r_big) {
      fall_out(l, label, lambda);
      fall_out(r, label, lambda);
    } else {
      const int big = l_big ? l : r;
      const int small = l_big ? r : l;
      fall_out(small, label, lambda);
      relabel[static_cast<std::size_t>(big)] = label;
      if (big >= n) {
        queue.push_back(big);
      } else {
        // A single point can only be "big" when min_cluster_size is 1.
        out.push_back({label, big, lambda, 1});
      }
    }
  }
  return out;
}

ClusterAssignment select_and_label(int n, const std::vector<Condensed>& tree) {
  const int root = n;
  int max_label = root;
  for (const auto& c : tree) max_label = std::max(max_label, std::max(c.parent, c.child));
  const auto clusters = static_cast<std::size_t>(max_label - root + 1);
  auto ci = [&](int label) { return static_cast<std::size_t>(label - root); };

  std::vector<double> birth(clusters, 0.0);
  std::vector<std::vector<int>> children(clusters);
  for (const auto& c : tree) {
    if (c.child >= n) {
      birth[ci(c.child)] = c.lambda;
      children[ci(c.parent)].push_back(c.child);
    }
  }
  std::vector<double> stability(clusters, 0.0);
  for (const auto& c : tree) {
    const double b = birth[ci(c.parent)];
    if (c.lambda > b) stability[ci(c.parent)] += (c.lambda - b) * static_cast<double>(c.size);
  }

  ClusterAssignment out;
  out.labels.assign(static_cast<std::size_t>(n), -1);

  if (children[0].empty()) {
    // Root-only hierarchy: one cluster of the points that persist longest.
    double max_lambda = 0.0;
    for (const auto& c : tree) {
      if (c.parent == root) max_lambda = std::max(max_lambda, c.lambda);
    }
    for (const auto& c : tree) {
      if (c.child < n && c.lambda >= max_lambda) out.labels[static_cast<std::size_t>(c.child)] = 0;
    }
    out.k = 1;
    return out;
  }

  // Excess of mass, children before parents; the root is never selected.
  std::vector<char> selected(clusters, 0);
  for (int label = max_label; label > root; --label) {
    const auto i = ci(label);
    double subtree = 0.0;
    for (int ch : children[i]) subtree += stability[ci(ch)];
    if (!children[i].empty() && subtree > stability[i]) {
      selected[i] = 0;
      stability[i] = subtree;
    } else {
      selected[i] = 1;
      std::vector<int> stack(children[i].begin(), children[i].end());
      while (!stack.empty()) {
        const int x = stack.back();
        stack.pop_back();
        selected[ci(x)] = 0;
        for (int ch : children[ci(x)]) stack.push_back(ch);
      }
    }
  }

  std::vector<int> final_label(clusters, -1);
  int k = 0;
  for (std::size_t i = 1; i < clusters; ++i) {
    if (selected[i]) final_label[i] = k++;
  }
  // Each point belongs to the selected cluster above the node it fell out of.
  std::vector<int> parent_of(clusters, -1);
  for (const auto& c : tree) {
    if (c.child >= n) parent_of[ci(c.child)] = c.parent;
  }
  std::vector<int> owner(clusters, -1);
  for (std::size_t i = 0; i < clusters; ++i) {
    int x = root + static_cast<int>(i);
    while (x != -1 && !selected[ci(x)]) x = parent_of[ci(x)];
    owner[i] = x == -1 ? -1 : final_label[ci(x)];
  }
  for (const auto& c : tree) {
    if (c.child < n) out.labels[static_cast<std::size_t>(c.child)] = owner[ci(c.parent)];
  }
  out.k = k;
  return out;
}

}  // namespace

std::vector<float> core_distances(const Tensor& points, int min_samples) {
  check_points(points);
  if (min_samples < 1) throw ConfigError("min_samples must be at least 1");
  return core_distances_impl(points, min_samples, nullptr);
}

std::vector<MstEdge> mutual_reachability_mst(const Tensor& points, std::span<const float> core,
                                             std::int64_t max_matrix_bytes) {
  check_points(points);
  const auto n = points.dim(0);
  if (static_cast<std::int64_t>(core.size()) != n) throw DimensionError("one core distance per point required");
  std::unique_ptr<float[]> D;
  if (fits(n, max_matrix_bytes)) D = distance_matrix(points);
  return prim(n, core, D.get(), points);
}

ClusterAssignment hdbscan(const Tensor& points, const HdbscanParams& params) {
  check_points(points);
  const auto n = points.dim(0);
  if (params.min_cluster_size < 2) throw ConfigError("min_cluster_size must be at least 2");
  if (params.min_samples < 1) throw ConfigError("min_samples must be at least 1");
  if (n < params.min_cluster_size) {
    throw ConfigError("HDBSCAN got " + std::to_string(n) + " points, fewer than min_cluster_size " +
                      std::to_string(params.min_cluster_size));
  }
  if (n > std::numeric_limits<int>::max() / 2) throw ConfigError("too many points for HDBSCAN");
  if (n == 1) return {{0}, 1};

  std::unique_ptr<float[]> D;
  if (fits(n, params.max_matrix_bytes)) D = distance_matrix(points);
  const auto core = core_distances_impl(points, params.min_samples, D.get());
  const auto edges = prim(n, core, D.get(), points);
  D.reset();
  const auto tree = single_linkage(static_cast<int>(n), edges);
  const auto condensed = condense(static_cast<int>(n), tree, params.min_cluster_size);
  return select_and_label(static_cast<int>(n), condensed);
}

ClusterAssignment hdbscan(const Tensor& points, const ClusteringConfig& config) {
  check_points(points);
  return hdbscan(points, config.resolve(points.dim(0)));
}

ClusterAssignment cluster_layer_activations(const LayerActivations& acts, const ClusteringConfig& config) {
  acts.validate();
  return hdbscan(acts.y, config.resolve(acts.size()));
}

ClusterAssignment cluster_layer_activations(std::span<const ActivationRecord> records,
                                            const ClusteringConfig& config) {
  return cluster_layer_activations(pack_records(records), config);
}

}  // namespace moex
