#include "moex/moe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "moex/error.hpp"
#include "moex/rng.hpp"

namespace moex {

const char* to_string(RoutingMetric m) noexcept {
  switch (m) {
    case RoutingMetric::Cosine: return "cosine";
    case RoutingMetric::Euclidean: return "euclidean";
    case RoutingMetric::Random: return "random";
  }
  return "unknown";
}

RoutingMetric parse_metric(const std::string& s) {
  if (s == "cosine") return RoutingMetric::Cosine;
  if (s == "euclidean") return RoutingMetric::Euclidean;
  if (s == "random") return RoutingMetric::Random;
  throw ConfigError("unknown routing metric '" + s + "'");
}

// ---------------------------------------------------------------------------
// Model structure

void MoeLayer::validate(std::int64_t embed) const {
  const std::string who = "MoE layer " + std::to_string(layer);
  const auto k = num_experts();
  if (k < 1) throw ValidationError(who + " has no experts");
  if (static_cast<int>(expert_ids.size()) != k || static_cast<int>(member_counts.size()) != k) {
    throw ValidationError(who + " expert metadata lengths disagree");
  }
  for (std::size_t i = 0; i < kept_indices.size(); ++i) {
    if (kept_indices[i] < 0 || kept_indices[i] >= original_hidden || (i > 0 && kept_indices[i - 1] >= kept_indices[i])) {
      throw ValidationError(who + " kept indices are not sorted and in range");
    }
  }
  const auto kept_n = kept();
  const Shape w1{embed, kept_n}, w2{kept_n, embed};
  if (compact.w1.shape() != w1 || compact.w2.shape() != w2 || compact.b1.shape() != Shape{kept_n} ||
      compact.b2.shape() != Shape{embed}) {
    throw DimensionError(who + " compacted weights do not match " + std::to_string(kept_n) + " kept neurons");
  }
  for (const auto& e : experts) {
    if (e.empty()) throw ValidationError(who + " has an empty expert");
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (e[i] < 0 || e[i] >= kept_n || (i > 0 && e[i - 1] >= e[i])) {
        throw ValidationError(who + " expert index outside the compacted range");
      }
    }
  }
  if (means.shape() != Shape{k, embed} || raw_means.shape() != Shape{k, embed}) {
    throw DimensionError(who + " routing means must be " + std::to_string(k) + "x" + std::to_string(embed));
  }
  for (int c = 0; c < k; ++c) {
    if (std::abs(l2_norm(means.row(c)) - 1.0) > 1e-5) throw ValidationError(who + " routing mean is not unit length");
  }
  require_finite(compact.w1, "MoE weights");
  require_finite(compact.w2, "MoE weights");
  require_finite(means, "routing means");
}

MoeModel MoeModel::dense(const ModelSpec& spec, const ModelWeights& weights) {
  MoeModel m;
  m.spec = spec;
  m.weights = weights;
  m.layers.resize(static_cast<std::size_t>(spec.num_layers));
  return m;
}

bool MoeModel::converted(int layer) const {
  return layer >= 0 && layer < static_cast<int>(layers.size()) && layers[static_cast<std::size_t>(layer)].has_value();
}

std::vector<int> MoeModel::converted_layers() const {
  std::vector<int> out;
  for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
    if (converted(l)) out.push_back(l);
  }
  return out;
}

void MoeModel::validate() const {
  spec.validate();
  if (static_cast<int>(layers.size()) != spec.num_layers) throw DimensionError("MoE layer slots do not match the spec");
  const auto conv = converted_layers();
  weights.validate(spec, conv);
  for (int l : conv) {
    const auto& ml = *layers[static_cast<std::size_t>(l)];
    if (ml.layer != l) throw ValidationError("MoE layer slot " + std::to_string(l) + " holds layer " + std::to_string(ml.layer));
    if (!weights.blocks[static_cast<std::size_t>(l)].mlp.empty()) {
      throw ValidationError("layer " + std::to_string(l) + " is both dense and MoE");
    }
    if (ml.original_hidden != spec.hidden_dim()) throw DimensionError("MoE layer hidden size differs from the spec");
    ml.validate(spec.embed_dim);
  }
}

bool MoeModel::identical(const MoeModel& o) const {
  if (!(spec == o.spec) || metric != o.metric || routing_seed != o.routing_seed || layers.size() != o.layers.size()) {
    return false;
  }
  if (!weights.identical(o.weights)) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].has_value() != o.layers[l].has_value()) return false;
    if (!layers[l]) continue;
    const auto& a = *layers[l];
    const auto& b = *o.layers[l];
    if (a.layer != b.layer || a.original_hidden != b.original_hidden || a.kept_indices != b.kept_indices ||
        a.experts != b.experts || a.expert_ids != b.expert_ids || a.member_counts != b.member_counts ||
        !a.compact.w1.identical(b.compact.w1) || !a.compact.b1.identical(b.compact.b1) ||
        !a.compact.w2.identical(b.compact.w2) || !a.compact.b2.identical(b.compact.b2) ||
        !a.means.identical(b.means) || !a.raw_means.identical(b.raw_means)) {
      return false;
    }
  }
  return true;
}

MoeModel assemble(const ModelSpec& spec, const ModelWeights& weights, const std::vector<ExpertSpec>& experts,
                  RoutingMetric metric, std::uint64_t routing_seed) {
  spec.validate();
  weights.validate(spec);
  const std::int64_t e = spec.embed_dim;
  const std::int64_t h = spec.hidden_dim();
  std::map<int, std::vector<const ExpertSpec*>> by_layer;
  for (const auto& s : experts) {
    if (s.layer < 0 || s.layer >= spec.num_layers) {
      throw ValidationError("expert for layer " + std::to_string(s.layer) + " outside the model");
    }
    s.validate(h, e);
    auto& list = by_layer[s.layer];
    for (const auto* other : list) {
      if (other->expert_id == s.expert_id) {
        throw ValidationError("duplicate expert id " + std::to_string(s.expert_id) + " in layer " + std::to_string(s.layer));
      }
    }
    list.push_back(&s);
  }

  MoeModel model = MoeModel::dense(spec, weights);
  model.metric = metric;
  model.routing_seed = routing_seed;
  for (auto& [layer, list] : by_layer) {
    std::sort(list.begin(), list.end(), [](const ExpertSpec* a, const ExpertSpec* b) { return a->expert_id < b->expert_id; });
    const auto& dense = weights.blocks[static_cast<std::size_t>(layer)].mlp;
    MoeLayer ml;
    ml.layer = layer;
    ml.original_hidden = h;
    std::vector<char> keep(static_cast<std::size_t>(h), 0);
    for (const auto* s : list) {
      for (int i : s->neuron_indices) keep[static_cast<std::size_t>(i)] = 1;
    }
    std::vector<int> remap(static_cast<std::size_t>(h), -1);
    for (int i = 0; i < h; ++i) {
      if (keep[static_cast<std::size_t>(i)]) {
        remap[static_cast<std::size_t>(i)] = static_cast<int>(ml.kept_indices.size());
        ml.kept_indices.push_back(i);
      }
    }
    const auto kept = ml.kept();
    ml.compact.w1 = Tensor({e, kept});
    ml.compact.b1 = Tensor({kept});
    ml.compact.w2 = Tensor({kept, e});
    ml.compact.b2 = dense.b2;
    for (std::int64_t j = 0; j < kept; ++j) {
      const int src = ml.kept_indices[static_cast<std::size_t>(j)];
      for (std::int64_t r = 0; r < e; ++r) ml.compact.w1.at(r, j) = dense.w1.at(r, src);
      ml.compact.b1[j] = dense.b1[src];
      std::copy_n(dense.w2.row(src).begin(), e, ml.compact.w2.row(j).begin());
    }
    const auto k = static_cast<std::int64_t>(list.size());
    ml.means = Tensor({k, e});
    ml.raw_means = Tensor({k, e});
    for (std::int64_t c = 0; c < k; ++c) {
      const auto* s = list[static_cast<std::size_t>(c)];
      std::vector<int> idx;
      for (int i : s->neuron_indices) idx.push_back(remap[static_cast<std::size_t>(i)]);
      ml.experts.push_back(std::move(idx));
      ml.expert_ids.push_back(s->expert_id);
      ml.member_counts.push_back(s->member_count);
      std::copy_n(s->mu.data(), e, ml.means.row(c).begin());
      const Tensor& raw = s->raw_mean.empty() ? s->mu : s->raw_mean;
      std::copy_n(raw.data(), e, ml.raw_means.row(c).begin());
    }
    model.weights.blocks[static_cast<std::size_t>(layer)].mlp = MlpParams{};
    model.layers[static_cast<std::size_t>(layer)] = std::move(ml);
  }
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// Routing

int route(std::span<const float> x, const Tensor& means, RoutingMetric metric) {
  if (means.rank() != 2 || means.dim(0) < 1) throw RoutingError("routing needs at least one expert mean");
  if (static_cast<std::int64_t>(x.size()) != means.dim(1)) {
    throw DimensionError("token width " + std::to_string(x.size()) + " does not match means " +
                         shape_to_string(means.shape()));
  }
  const auto k = means.dim(0);
  if (metric == RoutingMetric::Cosine) {
    double norm = 0.0;
    for (float v : x) norm += static_cast<double>(v) * v;
    if (!(norm > 0.0)) throw RoutingError("cannot route a zero-norm token by cosine similarity");
    int best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < k; ++c) {
      auto m = means.row(c);
      double dot = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) dot += static_cast<double>(m[i]) * x[i];
      if (dot > best_v) {
        best_v = dot;
        best = static_cast<int>(c);
      }
    }
    return best;
  }
  if (metric == RoutingMetric::Euclidean) {
    int best = 0;
    double best_v = std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < k; ++c) {
      auto m = means.row(c);
      double d = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double t = static_cast<double>(x[i]) - m[i];
        d += t * t;
      }
      if (d < best_v) {
        best_v = d;
        best = static_cast<int>(c);
      }
    }
    return best;
  }
  throw RoutingError("random routing needs token provenance; use random_route");
}

int route(std::span<const float> x, const MoeLayer& layer, RoutingMetric metric) {
  return route(x, metric == RoutingMetric::Euclidean ? layer.raw_means : layer.means, metric);
}

int random_route(std::uint64_t seed, int layer, std::int64_t image_id, int token_index, int num_experts) {
  if (num_experts < 1) throw RoutingError("routing needs at least one expert");
  const auto h = hash_combine({seed, static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(image_id),
                               static_cast<std::uint64_t>(token_index)});
  return static_cast<int>(h % static_cast<std::uint64_t>(num_experts));
}

// ---------------------------------------------------------------------------
// Expert evaluation

namespace {

struct ExpertWeights {
  Tensor w1;  // e × |E|
  Tensor b1;  // |E|
  Tensor w2;  // |E| × e
};

ExpertWeights gather_expert(const MoeLayer& layer, int expert) {
  const auto& idx = layer.experts[static_cast<std::size_t>(expert)];
  const auto e = layer.compact.w1.dim(0);
  const auto m = static_cast<std::int64_t>(idx.size());
  ExpertWeights w{Tensor({e, m}), Tensor({m}), Tensor({m, e})};
  for (std::int64_t j = 0; j < m; ++j) {
    const int src = idx[static_cast<std::size_t>(j)];
    for (std::int64_t r = 0; r < e; ++r) w.w1.at(r, j) = layer.compact.w1.at(r, src);
    w.b1[j] = layer.compact.b1[src];
    std::copy_n(layer.compact.w2.row(src).begin(), e, w.w2.row(j).begin());
  }
  return w;
}

/// rows × e input → rows × e output through one expert; fills pre/hidden.
Tensor run_expert(const ExpertWeights& w, const Tensor& b2, const Tensor& x, Tensor* pre_out, Tensor* hidden_out) {
  Tensor pre = matmul(x, w.w1);
  const auto m = w.b1.numel();
  for (std::int64_t r = 0; r < pre.rows(); ++r) {
    auto row = pre.row(r);
    for (std::int64_t j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] += w.b1[j];
  }
  Tensor hidden(pre.shape());
  for (std::int64_t i = 0; i < pre.numel(); ++i) hidden[i] = gelu(pre[i]);
  Tensor out = matmul(hidden, w.w2);
  for (std::int64_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::int64_t j = 0; j < b2.numel(); ++j) row[static_cast<std::size_t>(j)] += b2[j];
  }
  if (pre_out) *pre_out = std::move(pre);
  if (hidden_out) *hidden_out = std::move(hidden);
  return out;
}

class MoeMlpCache : public MlpCache {
 public:
  std::vector<std::vector<std::int64_t>> groups;  // rows per expert
  std::vector<Tensor> pre, hidden;                 // per expert, group rows × |E|
};

}  // namespace

Tensor expert_forward(const MoeLayer& layer, int expert, std::span<const float> x) {
  if (expert < 0 || expert >= layer.num_experts()) throw RoutingError("expert " + std::to_string(expert) + " does not exist");
  const auto e = layer.compact.w1.dim(0);
  if (static_cast<std::int64_t>(x.size()) != e) throw DimensionError("token width does not match the MoE layer");
  Tensor xt({1, e}, std::vector<float>(x.begin(), x.end()));
  return run_expert(gather_expert(layer, expert), layer.compact.b2, xt, nullptr, nullptr).reshape({e});
}

Tensor moe_mlp_forward(const MoeLayer& layer, std::span<const float> x, RoutingMetric metric) {
  return expert_forward(layer, route(x, layer, metric), x);
}

MoeMlpBackend::MoeMlpBackend(const MoeModel& model, MoeForwardOptions options) : model_(model), options_(options) {
  const auto L = static_cast<std::size_t>(model.spec.num_layers);
  if (options_.routes_out) options_.routes_out->assign(L, {});
  if (auto* ri = options_.router_inputs) {
    ri->sums.assign(L, {});
    ri->counts.assign(L, {});
    for (int l : model.converted_layers()) {
      const auto k = static_cast<std::size_t>(model.layers[static_cast<std::size_t>(l)]->num_experts());
      ri->sums[static_cast<std::size_t>(l)].assign(k * static_cast<std::size_t>(model.spec.embed_dim), 0.0);
      ri->counts[static_cast<std::size_t>(l)].assign(k, 0);
    }
  }
}

Tensor MoeMlpBackend::forward(int layer, const Tensor& x, const BatchInfo& batch,
                              std::unique_ptr<MlpCache>* cache) const {
  if (!model_.converted(layer)) {
    const auto& mlp = model_.weights.blocks[static_cast<std::size_t>(layer)].mlp;
    if (!cache) return dense_mlp_forward(mlp, x, nullptr);
    auto c = std::make_unique<DenseMlpCache>();
    Tensor out = dense_mlp_forward(mlp, x, c.get());
    *cache = std::move(c);
    return out;
  }
  const auto& ml = *model_.layers[static_cast<std::size_t>(layer)];
  const auto rows = x.rows();
  const auto e = x.cols();
  const int k = ml.num_experts();
  const std::vector<int>* forced = nullptr;
  if (options_.forced_routes && static_cast<int>(options_.forced_routes->size()) > layer &&
      !(*options_.forced_routes)[static_cast<std::size_t>(layer)].empty()) {
    forced = &(*options_.forced_routes)[static_cast<std::size_t>(layer)];
    if (static_cast<std::int64_t>(forced->size()) != rows) throw DimensionError("forced routes do not match the batch");
  }

  std::vector<int> routes(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    int expert;
    if (forced) {
      expert = (*forced)[static_cast<std::size_t>(r)];
      if (expert < 0 || expert >= k) throw RoutingError("forced route to missing expert " + std::to_string(expert));
    } else if (model_.metric == RoutingMetric::Random) {
      const auto image = static_cast<std::size_t>(r / batch.seq_len);
      const std::int64_t id = image < batch.image_ids.size() ? batch.image_ids[image] : static_cast<std::int64_t>(image);
      expert = random_route(model_.routing_seed, layer, id, static_cast<int>(r % batch.seq_len), k);
    } else {
      expert = route(x.row(r), ml, model_.metric);
    }
    routes[static_cast<std::size_t>(r)] = expert;
  }

  if (options_.trace) {
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto image = static_cast<std::size_t>(r / batch.seq_len);
      RouteEvent ev;
      ev.layer = layer;
      ev.token_index = static_cast<int>(r % batch.seq_len);
      ev.image_id = image < batch.image_ids.size() ? batch.image_ids[image] : static_cast<std::int64_t>(image);
      ev.expert = routes[static_cast<std::size_t>(r)];
      options_.trace->events.push_back(ev);
    }
  }
  if (options_.routes_out) (*options_.routes_out)[static_cast<std::size_t>(layer)] = routes;
  if (auto* ri = options_.router_inputs) {
    auto& sums = ri->sums[static_cast<std::size_t>(layer)];
    auto& counts = ri->counts[static_cast<std::size_t>(layer)];
    for (std::int64_t r = 0; r < rows; ++r) {
      const double norm = l2_norm(x.row(r));
      if (!(norm > 0.0)) continue;
      const auto ex = static_cast<std::size_t>(routes[static_cast<std::size_t>(r)]);
      auto xr = x.row(r);
      for (std::int64_t i = 0; i < e; ++i) sums[ex * static_cast<std::size_t>(e) + static_cast<std::size_t>(i)] += xr[static_cast<std::size_t>(i)] / norm;
      ++counts[ex];
    }
  }

  auto c = std::make_unique<MoeMlpCache>();
  c->groups.resize(static_cast<std::size_t>(k));
  for (std::int64_t r = 0; r < rows; ++r) c->groups[static_cast<std::size_t>(routes[static_cast<std::size_t>(r)])].push_back(r);
  c->pre.resize(static_cast<std::size_t>(k));
  c->hidden.resize(static_cast<std::size_t>(k));

  Tensor out({rows, e});
  for (int ex = 0; ex < k; ++ex) {
    const auto& g = c->groups[static_cast<std::size_t>(ex)];
    if (g.empty()) continue;
    Tensor xg({static_cast<std::int64_t>(g.size()), e});
    for (std::size_t i = 0; i < g.size(); ++i) std::copy_n(x.row(g[i]).begin(), e, xg.row(static_cast<std::int64_t>(i)).begin());
    Tensor og = run_expert(gather_expert(ml, ex), ml.compact.b2, xg, cache ? &c->pre[static_cast<std::size_t>(ex)] : nullptr,
                           cache ? &c->hidden[static_cast<std::size_t>(ex)] : nullptr);
    for (std::size_t i = 0; i < g.size(); ++i) std::copy_n(og.row(static_cast<std::int64_t>(i)).begin(), e, out.row(g[i]).begin());
  }
  if (cache) *cache = std::move(c);
  return out;
}

Tensor MoeMlpBackend::backward(int layer, const Tensor& x, const Tensor& grad_out, const MlpCache& cache,
                               MlpParams& grads) const {
  if (!model_.converted(layer)) {
    const auto& mlp = model_.weights.blocks[static_cast<std::size_t>(layer)].mlp;
    return dense_mlp_backward(mlp, x, grad_out, dynamic_cast<const DenseMlpCache&>(cache), grads);
  }
  const auto& ml = *model_.layers[static_cast<std::size_t>(layer)];
  const auto& c = dynamic_cast<const MoeMlpCache&>(cache);
  const auto e = x.cols();
  if (grads.w1.shape() != ml.compact.w1.shape() || grads.w2.shape() != ml.compact.w2.shape()) {
    throw DimensionError("MoE gradient buffers do not match layer " + std::to_string(layer));
  }
  Tensor dx({x.rows(), e});
  for (std::int64_t r = 0; r < grad_out.rows(); ++r) {
    auto g = grad_out.row(r);
    for (std::int64_t j = 0; j < e; ++j) grads.b2[j] += g[static_cast<std::size_t>(j)];
  }
  for (int ex = 0; ex < ml.num_experts(); ++ex) {
    const auto& g = c.groups[static_cast<std::size_t>(ex)];
    if (g.empty()) continue;
    const auto& idx = ml.experts[static_cast<std::size_t>(ex)];
    const auto m = static_cast<std::int64_t>(idx.size());
    const auto rows = static_cast<std::int64_t>(g.size());
    const ExpertWeights w = gather_expert(ml, ex);
    Tensor xg({rows, e});
    Tensor dout({rows, e});
    for (std::int64_t i = 0; i < rows; ++i) {
      std::copy_n(x.row(g[static_cast<std::size_t>(i)]).begin(), e, xg.row(i).begin());
      std::copy_n(grad_out.row(g[static_cast<std::size_t>(i)]).begin(), e, dout.row(i).begin());
    }
    const Tensor& pre = c.pre[static_cast<std::size_t>(ex)];
    const Tensor& hidden = c.hidden[static_cast<std::size_t>(ex)];
    Tensor dw2 = matmul_tn(hidden, dout);   // m × e
    Tensor dhid = matmul_nt(dout, w.w2);    // rows × m
    for (std::int64_t i = 0; i < dhid.numel(); ++i) dhid[i] *= gelu_derivative(pre[i]);
    Tensor dw1 = matmul_tn(xg, dhid);       // e × m
    Tensor dxg = matmul_nt(dhid, w.w1);     // rows × e
    for (std::int64_t j = 0; j < m; ++j) {
      const int dst = idx[static_cast<std::size_t>(j)];
      auto src = dw2.row(j);
      auto out = grads.w2.row(dst);
      for (std::int64_t t = 0; t < e; ++t) out[static_cast<std::size_t>(t)] += src[static_cast<std::size_t>(t)];
      for (std::int64_t r = 0; r < e; ++r) grads.w1.at(r, dst) += dw1.at(r, j);
      double bsum = 0.0;
      for (std::int64_t i = 0; i < rows; ++i) bsum += dhid.at(i, j);
      grads.b1[dst] += static_cast<float>(bsum);
    }
    for (std::int64_t i = 0; i < rows; ++i) std::copy_n(dxg.row(i).begin(), e, dx.row(g[static_cast<std::size_t>(i)]).begin());
  }
  return dx;
}

Tensor moe_forward(const MoeModel& model, const Tensor& images, std::span<const std::int64_t> image_ids,
                   const MoeForwardOptions& options) {
  MoeMlpBackend backend(model, options);
  return encoder_forward(model.spec, model.weights, backend, images, image_ids, false).logits;
}

// ---------------------------------------------------------------------------
// Traces

std::string RoutingTrace::to_csv() const {
  std::ostringstream os;
  os << "layer,token_index,image_id,class_label,expert_id\n";
  for (const auto& e : events) {
    os << e.layer << ',' << e.token_index << ',' << e.image_id << ',' << e.class_label << ',' << e.expert << '\n';
  }
  return os.str();
}

RoutingTrace RoutingTrace::from_csv(const std::string& text) {
  RoutingTrace t;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("layer,token_index,image_id,class_label,expert_id", 0) != 0) {
    throw FormatError(FormatFault::BadHeader, "routing trace CSV lacks its header line");
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    RouteEvent e;
    char c1, c2, c3, c4;
    std::istringstream ls(line);
    if (!(ls >> e.layer >> c1 >> e.token_index >> c2 >> e.image_id >> c3 >> e.class_label >> c4 >> e.expert) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw FormatError(FormatFault::BadHeader, "routing trace CSV line " + std::to_string(lineno) + " is malformed");
    }
    t.events.push_back(e);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Costs

double CostReport::macs_reduction() const {
  return dense_macs > 0 ? 1.0 - moe_macs / static_cast<double>(dense_macs) : 0.0;
}

double CostReport::params_reduction() const {
  return dense_params > 0 ? 1.0 - static_cast<double>(moe_params) / static_cast<double>(dense_params) : 0.0;
}

namespace {

struct DenseParts {
  std::int64_t seq, e, h, fixed_macs, mlp_macs_per_token, params, mlp_params;
};

DenseParts dense_parts(const ModelSpec& spec) {
  spec.validate();
  DenseParts p{};
  p.seq = spec.seq_len();
  p.e = spec.embed_dim;
  p.h = spec.hidden_dim();
  const std::int64_t np = spec.num_patches();
  const std::int64_t pd = spec.patch_dim();
  const std::int64_t L = spec.num_layers;
  const std::int64_t C = spec.num_classes;
  const auto S = p.seq;
  const auto e = p.e;
  const std::int64_t attn = 3 * S * e * e + 2 * S * S * e + S * e * e;
  p.fixed_macs = np * pd * e + L * attn + e * C;
  p.mlp_macs_per_token = 2 * e * p.h;
  p.mlp_params = e * p.h + p.h + p.h * e + e;
  const std::int64_t block = 2 * e + 3 * (e * e + e) + (e * e + e) + 2 * e + p.mlp_params;
  p.params = pd * e + e + e + S * e + L * block + 2 * e + e * C + C;
  return p;
}

}  // namespace

CostReport count_costs(const ModelSpec& spec) {
  const auto p = dense_parts(spec);
  CostReport r;
  r.dense_macs = p.fixed_macs + spec.num_layers * p.seq * p.mlp_macs_per_token;
  r.moe_macs = static_cast<double>(r.dense_macs);
  r.moe_macs_worst = r.dense_macs;
  r.dense_params = p.params;
  r.moe_params = p.params;
  for (int l = 0; l < spec.num_layers; ++l) {
    LayerCost lc;
    lc.layer = l;
    lc.dense_mlp_macs_per_token = p.mlp_macs_per_token;
    lc.worst_expert_macs_per_token = p.mlp_macs_per_token;
    lc.expected_expert_macs_per_token = static_cast<double>(p.mlp_macs_per_token);
    lc.dense_mlp_params = p.mlp_params;
    lc.moe_mlp_params = p.mlp_params;
    r.layers.push_back(lc);
  }
  return r;
}

CostReport count_costs(const MoeModel& model, const RoutingDistribution* distribution, bool include_routing_params) {
  CostReport r = count_costs(model.spec);
  const auto p = dense_parts(model.spec);
  double moe_macs = static_cast<double>(p.fixed_macs);
  std::int64_t worst = p.fixed_macs;
  std::int64_t params = p.params;
  for (int l = 0; l < model.spec.num_layers; ++l) {
    auto& lc = r.layers[static_cast<std::size_t>(l)];
    if (!model.converted(l)) {
      moe_macs += static_cast<double>(p.seq * p.mlp_macs_per_token);
      worst += p.seq * p.mlp_macs_per_token;
      continue;
    }
    const auto& ml = *model.layers[static_cast<std::size_t>(l)];
    const int k = ml.num_experts();
    lc.converted = true;
    lc.experts = k;
    lc.routing_macs_per_token = static_cast<std::int64_t>(k) * p.e;

    std::vector<double> frac(static_cast<std::size_t>(k), 0.0);
    const bool have = distribution && static_cast<int>(distribution->size()) > l &&
                      static_cast<int>((*distribution)[static_cast<std::size_t>(l)].size()) == k;
    if (have) {
      frac = (*distribution)[static_cast<std::size_t>(l)];
    } else {
      double total = 0.0;
      for (auto c : ml.member_counts) total += static_cast<double>(c);
      for (int c = 0; c < k; ++c) {
        frac[static_cast<std::size_t>(c)] =
            total > 0.0 ? static_cast<double>(ml.member_counts[static_cast<std::size_t>(c)]) / total : 1.0 / k;
      }
    }
    std::int64_t max_size = 0;
    double expected = 0.0;
    for (int c = 0; c < k; ++c) {
      const auto sz = static_cast<std::int64_t>(ml.experts[static_cast<std::size_t>(c)].size());
      max_size = std::max(max_size, sz);
      expected += frac[static_cast<std::size_t>(c)] * static_cast<double>(2 * sz * p.e);
    }
    lc.worst_expert_macs_per_token = 2 * max_size * p.e;
    lc.expected_expert_macs_per_token = expected;
    moe_macs += static_cast<double>(p.seq) * (static_cast<double>(lc.routing_macs_per_token) + expected);
    worst += p.seq * (lc.routing_macs_per_token + lc.worst_expert_macs_per_token);
    r.routing_overhead_macs += p.seq * lc.routing_macs_per_token;

    const auto kept = ml.kept();
    lc.moe_mlp_params = p.e * kept + kept + kept * p.e + p.e + (include_routing_params ? k * p.e : 0);
    params += lc.moe_mlp_params - p.mlp_params;
  }
  r.moe_macs = moe_macs;
  r.moe_macs_worst = worst;
  r.moe_params = params;
  return r;
}

RoutingDistribution routing_distribution_of(const MoeModel& model, const RoutingTrace& trace) {
  RoutingDistribution dist(static_cast<std::size_t>(model.spec.num_layers));
  std::vector<std::vector<std::int64_t>> counts(dist.size());
  for (int l : model.converted_layers()) {
    counts[static_cast<std::size_t>(l)].assign(static_cast<std::size_t>(model.layers[static_cast<std::size_t>(l)]->num_experts()), 0);
  }
  for (const auto& ev : trace.events) {
    if (ev.layer < 0 || ev.layer >= model.spec.num_layers) continue;
    auto& c = counts[static_cast<std::size_t>(ev.layer)];
    if (ev.expert >= 0 && ev.expert < static_cast<int>(c.size())) ++c[static_cast<std::size_t>(ev.expert)];
  }
  for (std::size_t l = 0; l < dist.size(); ++l) {
    std::int64_t total = 0;
    for (auto v : counts[l]) total += v;
    if (total == 0) continue;
    for (auto v : counts[l]) dist[l].push_back(static_cast<double>(v) / static_cast<double>(total));
  }
  return dist;
}

}  // namespace moex
