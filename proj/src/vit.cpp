#include "moex/vit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gemm.hpp"
#include "moex/error.hpp"

namespace moex {

// ---------------------------------------------------------------------------
// ModelSpec / ModelWeights

void ModelSpec::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 || num_layers <= 0 ||
      num_heads <= 0 || num_classes <= 0) {
    throw ConfigError("model spec: all sizes must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("model spec: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("model spec: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  const double hidden = mlp_ratio * embed_dim;
  if (!(hidden >= 1.0) || std::abs(hidden - std::round(hidden)) > 1e-9) {
    throw ConfigError("model spec: mlp_ratio * embed_dim must be a positive integer");
  }
  if (!(layer_norm_eps > 0.0f)) throw ConfigError("model spec: layer_norm_eps must be positive");
}

int ModelSpec::hidden_dim() const { return static_cast<int>(std::lround(mlp_ratio * embed_dim)); }

namespace {

Tensor xavier(Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
  const auto limit = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  return rng.uniform_tensor({fan_in, fan_out}, -limit, limit);
}

template <class W, class F>
void visit_weights(W& w, F&& fn) {
  auto visit = [&](const std::string& name, auto& t) {
    if (!t.empty()) fn(name, t);
  };
  visit("patch_embed.weight", w.patch_w);
  visit("patch_embed.bias", w.patch_b);
  visit("class_token", w.class_token);
  visit("pos_embed", w.pos_embed);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    visit(p + "ln1.gamma", b.ln1_gamma);
    visit(p + "ln1.beta", b.ln1_beta);
    visit(p + "attn.wq", b.attn.wq);
    visit(p + "attn.bq", b.attn.bq);
    visit(p + "attn.wk", b.attn.wk);
    visit(p + "attn.bk", b.attn.bk);
    visit(p + "attn.wv", b.attn.wv);
    visit(p + "attn.bv", b.attn.bv);
    visit(p + "attn.wo", b.attn.wo);
    visit(p + "attn.bo", b.attn.bo);
    visit(p + "ln2.gamma", b.ln2_gamma);
    visit(p + "ln2.beta", b.ln2_beta);
    visit(p + "mlp.w1", b.mlp.w1);
    visit(p + "mlp.b1", b.mlp.b1);
    visit(p + "mlp.w2", b.mlp.w2);
    visit(p + "mlp.b2", b.mlp.b2);
  }
  visit("norm.gamma", w.norm_gamma);
  visit("norm.beta", w.norm_beta);
  visit("head.weight", w.head_w);
  visit("head.bias", w.head_b);
}

}  // namespace

ModelWeights ModelWeights::zeros(const ModelSpec& spec) {
  spec.validate();
  const std::int64_t e = spec.embed_dim;
  const std::int64_t h = spec.hidden_dim();
  ModelWeights w;
  w.patch_w = Tensor({spec.patch_dim(), e});
  w.patch_b = Tensor({e});
  w.class_token = Tensor({e});
  w.pos_embed = Tensor({spec.seq_len(), e});
  w.blocks.resize(static_cast<std::size_t>(spec.num_layers));
  for (auto& b : w.blocks) {
    b.ln1_gamma = Tensor({e});
    b.ln1_beta = Tensor({e});
    for (Tensor* m : {&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo}) *m = Tensor({e, e});
    for (Tensor* v : {&b.attn.bq, &b.attn.bk, &b.attn.bv, &b.attn.bo}) *v = Tensor({e});
    b.ln2_gamma = Tensor({e});
    b.ln2_beta = Tensor({e});
    b.mlp.w1 = Tensor({e, h});
    b.mlp.b1 = Tensor({h});
    b.mlp.w2 = Tensor({h, e});
    b.mlp.b2 = Tensor({e});
  }
  w.norm_gamma = Tensor({e});
  w.norm_beta = Tensor({e});
  w.head_w = Tensor({e, spec.num_classes});
  w.head_b = Tensor({spec.num_classes});
  return w;
}

ModelWeights ModelWeights::init(const ModelSpec& spec, Rng& rng) {
  ModelWeights w = zeros(spec);
  const std::int64_t e = spec.embed_dim;
  const std::int64_t h = spec.hidden_dim();
  w.patch_w = xavier(rng, spec.patch_dim(), e);
  w.class_token = rng.normal_tensor({e}, 0.02f);
  w.pos_embed = rng.normal_tensor({spec.seq_len(), e}, 0.02f);
  for (auto& b : w.blocks) {
    b.ln1_gamma.fill(1.0f);
    b.ln2_gamma.fill(1.0f);
    b.attn.wq = xavier(rng, e, e);
    b.attn.wk = xavier(rng, e, e);
    b.attn.wv = xavier(rng, e, e);
    b.attn.wo = xavier(rng, e, e);
    b.mlp.w1 = xavier(rng, e, h);
    b.mlp.w2 = xavier(rng, h, e);
  }
  w.norm_gamma.fill(1.0f);
  w.head_w = xavier(rng, e, spec.num_classes);
  return w;
}

ModelWeights ModelWeights::zeros_like() const {
  ModelWeights z = *this;
  z.for_each([](const std::string&, Tensor& t) { t.fill(0.0f); });
  return z;
}

void ModelWeights::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_weights(*this, fn);
}

void ModelWeights::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_weights(*this, fn);
}

void ModelWeights::validate(const ModelSpec& spec, const std::vector<int>& compacted_layers) const {
  spec.validate();
  const std::int64_t e = spec.embed_dim;
  const std::int64_t h = spec.hidden_dim();
  auto expect = [](const Tensor& t, const Shape& s, const std::string& name) {
    if (t.shape() != s) {
      throw DimensionError(name + ": expected " + shape_to_string(s) + ", got " + shape_to_string(t.shape()));
    }
    if (!all_finite(t.values())) throw NumericError(name + ": non-finite value");
  };
  expect(patch_w, {spec.patch_dim(), e}, "patch_embed.weight");
  expect(patch_b, {e}, "patch_embed.bias");
  expect(class_token, {e}, "class_token");
  expect(pos_embed, {spec.seq_len(), e}, "pos_embed");
  if (static_cast<int>(blocks.size()) != spec.num_layers) throw DimensionError("block count does not match spec");
  for (int l = 0; l < spec.num_layers; ++l) {
    const auto& b = blocks[static_cast<std::size_t>(l)];
    const std::string p = "blocks." + std::to_string(l) + ".";
    expect(b.ln1_gamma, {e}, p + "ln1.gamma");
    expect(b.ln1_beta, {e}, p + "ln1.beta");
    expect(b.attn.wq, {e, e}, p + "attn.wq");
    expect(b.attn.wk, {e, e}, p + "attn.wk");
    expect(b.attn.wv, {e, e}, p + "attn.wv");
    expect(b.attn.wo, {e, e}, p + "attn.wo");
    expect(b.attn.bq, {e}, p + "attn.bq");
    expect(b.attn.bk, {e}, p + "attn.bk");
    expect(b.attn.bv, {e}, p + "attn.bv");
    expect(b.attn.bo, {e}, p + "attn.bo");
    expect(b.ln2_gamma, {e}, p + "ln2.gamma");
    expect(b.ln2_beta, {e}, p + "ln2.beta");
    const bool compacted =
        std::find(compacted_layers.begin(), compacted_layers.end(), l) != compacted_layers.end();
    if (compacted) {
      if (!b.mlp.empty()) throw DimensionError(p + "mlp: converted layer must not carry dense weights");
      continue;
    }
    expect(b.mlp.w1, {e, h}, p + "mlp.w1");
    expect(b.mlp.b1, {h}, p + "mlp.b1");
    expect(b.mlp.w2, {h, e}, p + "mlp.w2");
    expect(b.mlp.b2, {e}, p + "mlp.b2");
  }
  expect(norm_gamma, {e}, "norm.gamma");
  expect(norm_beta, {e}, "norm.beta");
  expect(head_w, {e, spec.num_classes}, "head.weight");
  expect(head_b, {spec.num_classes}, "head.bias");
}

std::int64_t ModelWeights::parameter_count() const {
  std::int64_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

bool ModelWeights::identical(const ModelWeights& other) const {
  std::vector<const Tensor*> mine;
  std::vector<const Tensor*> theirs;
  for_each([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
  other.for_each([&](const std::string&, const Tensor& t) { theirs.push_back(&t); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (!mine[i]->identical(*theirs[i])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

/// x·w + b over all rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  const auto n = y.cols();
  for (std::int64_t r = 0; r < y.rows(); ++r) {
    float* row = y.data() + r * n;
    for (std::int64_t j = 0; j < n; ++j) row[j] += b[j];
  }
  return y;
}

/// Accumulates the weight/bias gradients of y = x·w + b and returns dL/dx.
Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor& db) {
  detail::gemm(x.cols(), dy.cols(), x.rows(), {x.data(), 1, x.cols()}, {dy.data(), dy.cols(), 1}, dw.data(), dw.cols(),
               true);
  const auto n = dy.cols();
  std::vector<float> colsum(static_cast<std::size_t>(n), 0.0f);
  for (std::int64_t r = 0; r < dy.rows(); ++r) {
    const float* row = dy.data() + r * n;
    for (std::int64_t j = 0; j < n; ++j) colsum[static_cast<std::size_t>(j)] += row[j];
  }
  for (std::int64_t j = 0; j < n; ++j) db[j] += colsum[static_cast<std::size_t>(j)];
  return matmul_nt(dy, w);
}

void add_in_place(Tensor& dst, const Tensor& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (std::int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

Tensor ln_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps, Tensor* xhat_out,
                  Tensor* rstd_out) {
  const auto rows = x.rows();
  const auto e = x.cols();
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  Tensor rstd({rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(e);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(e);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<float>(rs);
    auto xh = xhat.row(r);
    auto out = y.row(r);
    for (std::int64_t i = 0; i < e; ++i) {
      xh[i] = static_cast<float>((in[i] - mean) * rs);
      out[i] = xh[i] * gamma[i] + beta[i];
    }
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (rstd_out) *rstd_out = std::move(rstd);
  return y;
}

Tensor ln_backward(const Tensor& dy, const Tensor& xhat, const Tensor& rstd, const Tensor& gamma, Tensor& dgamma,
                   Tensor& dbeta) {
  const auto rows = dy.rows();
  const auto e = dy.cols();
  Tensor dx(dy.shape());
  std::vector<float> dxhat(static_cast<std::size_t>(e));
  for (std::int64_t r = 0; r < rows; ++r) {
    auto g = dy.row(r);
    auto xh = xhat.row(r);
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::int64_t i = 0; i < e; ++i) {
      dgamma[i] += g[i] * xh[i];
      dbeta[i] += g[i];
      dxhat[static_cast<std::size_t>(i)] = g[i] * gamma[i];
      mean_d += dxhat[static_cast<std::size_t>(i)];
      mean_dx += static_cast<double>(dxhat[static_cast<std::size_t>(i)]) * xh[i];
    }
    mean_d /= static_cast<double>(e);
    mean_dx /= static_cast<double>(e);
    auto out = dx.row(r);
    for (std::int64_t i = 0; i < e; ++i) {
      out[i] = static_cast<float>(rstd[r] * (dxhat[static_cast<std::size_t>(i)] - mean_d - xh[i] * mean_dx));
    }
  }
  return dx;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dense MLP

Tensor dense_mlp_forward(const MlpParams& mlp, const Tensor& x, DenseMlpCache* cache) {
  Tensor pre = linear(x, mlp.w1, mlp.b1);
  Tensor hidden(pre.shape());
  for (std::int64_t i = 0; i < pre.numel(); ++i) hidden[i] = gelu(pre[i]);
  Tensor out = linear(hidden, mlp.w2, mlp.b2);
  if (cache) {
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

Tensor dense_mlp_backward(const MlpParams& mlp, const Tensor& x, const Tensor& grad_out, const DenseMlpCache& cache,
                          MlpParams& grads) {
  Tensor dhidden = linear_backward(cache.hidden, mlp.w2, grad_out, grads.w2, grads.b2);
  for (std::int64_t i = 0; i < dhidden.numel(); ++i) dhidden[i] *= gelu_derivative(cache.pre[i]);
  return linear_backward(x, mlp.w1, dhidden, grads.w1, grads.b1);
}

Tensor DenseMlpBackend::forward(int layer, const Tensor& x, const BatchInfo&, std::unique_ptr<MlpCache>* cache) const {
  const auto& mlp = weights_.blocks[static_cast<std::size_t>(layer)].mlp;
  if (!cache) return dense_mlp_forward(mlp, x, nullptr);
  auto c = std::make_unique<DenseMlpCache>();
  Tensor out = dense_mlp_forward(mlp, x, c.get());
  *cache = std::move(c);
  return out;
}

Tensor DenseMlpBackend::backward(int layer, const Tensor& x, const Tensor& grad_out, const MlpCache& cache,
                                 MlpParams& grads) const {
  const auto& mlp = weights_.blocks[static_cast<std::size_t>(layer)].mlp;
  return dense_mlp_backward(mlp, x, grad_out, dynamic_cast<const DenseMlpCache&>(cache), grads);
}

// ---------------------------------------------------------------------------
// Encoder

struct LayerCache {
  Tensor ln1_xhat, ln1_rstd, h1;
  Tensor q, k, v;
  Tensor probs;  // images × heads × seq × seq
  Tensor ctx;
  Tensor ln2_xhat, ln2_rstd, h2;
  std::unique_ptr<MlpCache> mlp;
};

struct EncoderCache {
  int batch = 0;
  std::vector<std::int64_t> image_ids;
  Tensor patches;
  std::vector<LayerCache> layers;
  Tensor lnf_xhat, lnf_rstd, pooled;
};

Tensor patchify(const ModelSpec& spec, const Tensor& images) {
  const int c = spec.channels;
  const int s = spec.image_size;
  const int p = spec.patch_size;
  if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != s || images.dim(3) != s) {
    throw DimensionError("images must be [batch, " + std::to_string(c) + ", " + std::to_string(s) + ", " +
                         std::to_string(s) + "], got " + shape_to_string(images.shape()));
  }
  const std::int64_t batch = images.dim(0);
  const int g = spec.grid();
  Tensor out({batch * spec.num_patches(), spec.patch_dim()});
  float* dst = out.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (int gy = 0; gy < g; ++gy) {
      for (int gx = 0; gx < g; ++gx) {
        for (int ch = 0; ch < c; ++ch) {
          const float* plane = images.data() + ((b * c + ch) * s) * s;
          for (int py = 0; py < p; ++py) {
            const float* src = plane + (gy * p + py) * s + gx * p;
            dst = std::copy(src, src + p, dst);
          }
        }
      }
    }
  }
  return out;
}

namespace {

struct AttentionDims {
  int batch, seq, heads, head_dim, embed;
};

/// Multi-head attention on (batch·seq) × e rows; probabilities stored when requested.
Tensor attention_forward(const AttentionDims& d, const Tensor& q, const Tensor& k, const Tensor& v, Tensor* probs_out) {
  using detail::gemm;
  Tensor ctx({static_cast<std::int64_t>(d.batch) * d.seq, d.embed});
  Tensor probs;
  if (probs_out) probs = Tensor({d.batch, d.heads, d.seq, d.seq});
  const float scale = 1.0f / std::sqrt(static_cast<float>(d.head_dim));
  const std::int64_t e = d.embed, s = d.seq;
  std::vector<float> scores(static_cast<std::size_t>(s * s));
  for (int b = 0; b < d.batch; ++b) {
    for (int h = 0; h < d.heads; ++h) {
      const std::int64_t off = static_cast<std::int64_t>(b) * s * e + static_cast<std::int64_t>(h) * d.head_dim;
      gemm(s, s, d.head_dim, {q.data() + off, e, 1}, {k.data() + off, 1, e}, scores.data(), s, false);
      for (std::int64_t i = 0; i < s; ++i) {
        float* row = scores.data() + i * s;
        float mx = -INFINITY;
        for (std::int64_t j = 0; j < s; ++j) mx = std::max(mx, row[j] *= scale);
        float sum = 0.0f;
        for (std::int64_t j = 0; j < s; ++j) sum += (row[j] = std::exp(row[j] - mx));
        for (std::int64_t j = 0; j < s; ++j) row[j] /= sum;
      }
      gemm(s, d.head_dim, s, {scores.data(), s, 1}, {v.data() + off, e, 1}, ctx.data() + off, e, false);
      if (probs_out) {
        float* dst = probs.data() + ((static_cast<std::int64_t>(b) * d.heads + h) * s) * s;
        std::copy(scores.begin(), scores.end(), dst);
      }
    }
  }
  if (probs_out) *probs_out = std::move(probs);
  return ctx;
}

void attention_backward(const AttentionDims& d, const LayerCache& lc, const Tensor& dctx, Tensor& dq, Tensor& dk,
                        Tensor& dv) {
  using detail::gemm;
  const float scale = 1.0f / std::sqrt(static_cast<float>(d.head_dim));
  dq = Tensor(lc.q.shape());
  dk = Tensor(lc.k.shape());
  dv = Tensor(lc.v.shape());
  const std::int64_t e = d.embed, s = d.seq;
  std::vector<float> dprobs(static_cast<std::size_t>(s * s));
  std::vector<float> dscores(static_cast<std::size_t>(s * s));
  for (int b = 0; b < d.batch; ++b) {
    for (int h = 0; h < d.heads; ++h) {
      const std::int64_t off = static_cast<std::int64_t>(b) * s * e + static_cast<std::int64_t>(h) * d.head_dim;
      const float* probs = lc.probs.data() + ((static_cast<std::int64_t>(b) * d.heads + h) * s) * s;
      gemm(s, d.head_dim, s, {probs, 1, s}, {dctx.data() + off, e, 1}, dv.data() + off, e, false);
      gemm(s, s, d.head_dim, {dctx.data() + off, e, 1}, {lc.v.data() + off, 1, e}, dprobs.data(), s, false);
      for (std::int64_t i = 0; i < s; ++i) {
        const float* p = probs + i * s;
        const float* dp = dprobs.data() + i * s;
        float dot = 0.0f;
        for (std::int64_t j = 0; j < s; ++j) dot += dp[j] * p[j];
        float* ds = dscores.data() + i * s;
        for (std::int64_t j = 0; j < s; ++j) ds[j] = p[j] * (dp[j] - dot) * scale;
      }
      gemm(s, d.head_dim, s, {dscores.data(), s, 1}, {lc.k.data() + off, e, 1}, dq.data() + off, e, false);
      gemm(s, d.head_dim, s, {dscores.data(), 1, s}, {lc.q.data() + off, e, 1}, dk.data() + off, e, false);
    }
  }
}

}  // namespace

EncoderOutput encoder_forward(const ModelSpec& spec, const ModelWeights& weights, const MlpBackend& mlp,
                              const Tensor& images, std::span<const std::int64_t> image_ids, bool keep_cache,
                              const CaptureRequest* capture) {
  Tensor patches = patchify(spec, images);
  const int batch = static_cast<int>(images.dim(0));
  const int seq = spec.seq_len();
  const int np = spec.num_patches();
  const std::int64_t e = spec.embed_dim;
  std::vector<std::int64_t> ids;
  if (image_ids.empty()) {
    ids.resize(static_cast<std::size_t>(batch));
    std::iota(ids.begin(), ids.end(), 0);
  } else {
    if (static_cast<int>(image_ids.size()) != batch) throw DimensionError("image_ids size does not match batch");
    ids.assign(image_ids.begin(), image_ids.end());
  }
  if (capture) {
    for (int l : capture->layers) {
      if (l < 0 || l >= spec.num_layers) throw ConfigError("capture layer " + std::to_string(l) + " out of range");
    }
    if (!capture->labels.empty() && static_cast<int>(capture->labels.size()) != batch) {
      throw DimensionError("capture labels size does not match batch");
    }
  }
  BatchInfo info{seq, ids};

  auto cache = keep_cache ? std::make_shared<EncoderCache>() : nullptr;
  if (cache) {
    cache->batch = batch;
    cache->image_ids = ids;
    cache->layers.resize(static_cast<std::size_t>(spec.num_layers));
  }

  Tensor emb = linear(patches, weights.patch_w, weights.patch_b);
  Tensor x({static_cast<std::int64_t>(batch) * seq, e});
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < seq; ++t) {
      auto dst = x.row(static_cast<std::int64_t>(b) * seq + t);
      auto pos = weights.pos_embed.row(t);
      auto src = t == 0 ? weights.class_token.values() : emb.row(static_cast<std::int64_t>(b) * np + t - 1);
      for (std::int64_t i = 0; i < e; ++i) dst[i] = src[i] + pos[i];
    }
  }
  if (cache) cache->patches = std::move(patches);

  const AttentionDims dims{batch, seq, spec.num_heads, spec.head_dim(), spec.embed_dim};
  for (int l = 0; l < spec.num_layers; ++l) {
    const auto& blk = weights.blocks[static_cast<std::size_t>(l)];
    LayerCache scratch;
    LayerCache& lc = cache ? cache->layers[static_cast<std::size_t>(l)] : scratch;

    Tensor h1 = ln_forward(x, blk.ln1_gamma, blk.ln1_beta, spec.layer_norm_eps, cache ? &lc.ln1_xhat : nullptr,
                           cache ? &lc.ln1_rstd : nullptr);
    Tensor q = linear(h1, blk.attn.wq, blk.attn.bq);
    Tensor k = linear(h1, blk.attn.wk, blk.attn.bk);
    Tensor v = linear(h1, blk.attn.wv, blk.attn.bv);
    Tensor ctx = attention_forward(dims, q, k, v, cache ? &lc.probs : nullptr);
    Tensor attn_out = linear(ctx, blk.attn.wo, blk.attn.bo);
    add_in_place(x, attn_out);

    Tensor h2 = ln_forward(x, blk.ln2_gamma, blk.ln2_beta, spec.layer_norm_eps, cache ? &lc.ln2_xhat : nullptr,
                           cache ? &lc.ln2_rstd : nullptr);
    const bool capture_here = capture && capture->out &&
                              std::find(capture->layers.begin(), capture->layers.end(), l) != capture->layers.end();
    std::unique_ptr<MlpCache> mlp_cache;
    Tensor mlp_out = mlp.forward(l, h2, info, (cache || capture_here) ? &mlp_cache : nullptr);
    if (capture_here) {
      const auto* dense = dynamic_cast<const DenseMlpCache*>(mlp_cache.get());
      if (!dense) throw ValidationError("activation capture requires a dense MLP at layer " + std::to_string(l));
      const auto hdim = dense->hidden.cols();
      for (int b = 0; b < batch; ++b) {
        for (int t = capture->include_class_token ? 0 : 1; t < seq; ++t) {
          const std::int64_t r = static_cast<std::int64_t>(b) * seq + t;
          ActivationRecord rec;
          rec.layer = l;
          rec.token_index = t;
          rec.image_id = ids[static_cast<std::size_t>(b)];
          rec.class_label = capture->labels.empty() ? -1 : capture->labels[static_cast<std::size_t>(b)];
          auto xr = h2.row(r);
          auto yr = dense->hidden.row(r);
          rec.x = Tensor({e}, std::vector<float>(xr.begin(), xr.end()));
          rec.y = Tensor({hdim}, std::vector<float>(yr.begin(), yr.end()));
          capture->out->push_back(std::move(rec));
        }
      }
    }
    add_in_place(x, mlp_out);

    if (cache) {
      lc.h1 = std::move(h1);
      lc.q = std::move(q);
      lc.k = std::move(k);
      lc.v = std::move(v);
      lc.ctx = std::move(ctx);
      lc.h2 = std::move(h2);
      lc.mlp = std::move(mlp_cache);
    }
  }

  Tensor cls({batch, e});
  for (int b = 0; b < batch; ++b) {
    auto src = x.row(static_cast<std::int64_t>(b) * seq);
    std::copy(src.begin(), src.end(), cls.row(b).begin());
  }
  Tensor pooled = ln_forward(cls, weights.norm_gamma, weights.norm_beta, spec.layer_norm_eps,
                             cache ? &cache->lnf_xhat : nullptr, cache ? &cache->lnf_rstd : nullptr);
  Tensor logits = linear(pooled, weights.head_w, weights.head_b);
  require_finite(logits, "forward");
  if (cache) cache->pooled = std::move(pooled);
  return {std::move(logits), std::move(cache)};
}

void encoder_backward(const ModelSpec& spec, const ModelWeights& weights, const MlpBackend& mlp,
                      const EncoderCache& cache, const Tensor& grad_logits, ModelWeights& grads,
                      const std::function<MlpParams&(int)>& mlp_grads) {
  const int batch = cache.batch;
  const int seq = spec.seq_len();
  const int np = spec.num_patches();
  const std::int64_t e = spec.embed_dim;
  const AttentionDims dims{batch, seq, spec.num_heads, spec.head_dim(), spec.embed_dim};

  Tensor dpooled = linear_backward(cache.pooled, weights.head_w, grad_logits, grads.head_w, grads.head_b);
  Tensor dcls = ln_backward(dpooled, cache.lnf_xhat, cache.lnf_rstd, weights.norm_gamma, grads.norm_gamma,
                            grads.norm_beta);
  Tensor dx({static_cast<std::int64_t>(batch) * seq, e});
  for (int b = 0; b < batch; ++b) {
    auto src = dcls.row(b);
    std::copy(src.begin(), src.end(), dx.row(static_cast<std::int64_t>(b) * seq).begin());
  }

  for (int l = spec.num_layers - 1; l >= 0; --l) {
    const auto& blk = weights.blocks[static_cast<std::size_t>(l)];
    auto& g = grads.blocks[static_cast<std::size_t>(l)];
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];

    Tensor dh2 = mlp.backward(l, lc.h2, dx, *lc.mlp, mlp_grads(l));
    add_in_place(dx, ln_backward(dh2, lc.ln2_xhat, lc.ln2_rstd, blk.ln2_gamma, g.ln2_gamma, g.ln2_beta));

    Tensor dctx = linear_backward(lc.ctx, blk.attn.wo, dx, g.attn.wo, g.attn.bo);
    Tensor dq, dk, dv;
    attention_backward(dims, lc, dctx, dq, dk, dv);
    Tensor dh1 = linear_backward(lc.h1, blk.attn.wq, dq, g.attn.wq, g.attn.bq);
    add_in_place(dh1, linear_backward(lc.h1, blk.attn.wk, dk, g.attn.wk, g.attn.bk));
    add_in_place(dh1, linear_backward(lc.h1, blk.attn.wv, dv, g.attn.wv, g.attn.bv));
    add_in_place(dx, ln_backward(dh1, lc.ln1_xhat, lc.ln1_rstd, blk.ln1_gamma, g.ln1_gamma, g.ln1_beta));
  }

  Tensor demb({static_cast<std::int64_t>(batch) * np, e});
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < seq; ++t) {
      auto src = dx.row(static_cast<std::int64_t>(b) * seq + t);
      auto pos = grads.pos_embed.row(t);
      for (std::int64_t i = 0; i < e; ++i) pos[i] += src[i];
      if (t == 0) {
        for (std::int64_t i = 0; i < e; ++i) grads.class_token[i] += src[i];
      } else {
        std::copy(src.begin(), src.end(), demb.row(static_cast<std::int64_t>(b) * np + t - 1).begin());
      }
    }
  }
  linear_backward(cache.patches, weights.patch_w, demb, grads.patch_w, grads.patch_b);
}

// ---------------------------------------------------------------------------
// Loss and public entry points

namespace {

std::vector<double> softmax_row(std::span<const float> z, double temperature) {
  std::vector<double> p(z.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : z) mx = std::max(mx, static_cast<double>(v) / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(static_cast<double>(z[i]) / temperature - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace

LossResult compute_loss(const Tensor& logits, std::span<const int> labels, const LossSpec& loss,
                        const Tensor* teacher_logits) {
  const auto batch = logits.rows();
  const auto classes = logits.cols();
  if (batch == 0) throw ValidationError("loss over an empty batch");
  if (loss.ce_weight != 0.0 && static_cast<std::int64_t>(labels.size()) != batch) {
    throw DimensionError("label count does not match batch");
  }
  if (loss.kd_weight != 0.0) {
    if (!teacher_logits || teacher_logits->shape() != logits.shape()) {
      throw DimensionError("distillation requires teacher logits of the student's shape");
    }
    if (!(loss.temperature > 0.0)) throw ConfigError("distillation temperature must be positive");
  }
  LossResult out;
  out.grad_logits = Tensor(logits.shape());
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::int64_t r = 0; r < batch; ++r) {
    auto z = logits.row(r);
    auto g = out.grad_logits.row(r);
    std::vector<double> grad(static_cast<std::size_t>(classes), 0.0);
    if (loss.ce_weight != 0.0) {
      const int y = labels[static_cast<std::size_t>(r)];
      if (y < 0 || y >= classes) throw ValidationError("label " + std::to_string(y) + " out of range");
      auto p = softmax_row(z, 1.0);
      total += loss.ce_weight * -std::log(std::max(p[static_cast<std::size_t>(y)], 1e-300));
      for (std::int64_t c = 0; c < classes; ++c) {
        grad[static_cast<std::size_t>(c)] += loss.ce_weight * (p[static_cast<std::size_t>(c)] - (c == y ? 1.0 : 0.0));
      }
    }
    if (loss.kd_weight != 0.0) {
      const double t = loss.temperature;
      auto ps = softmax_row(z, t);
      auto pt = softmax_row(teacher_logits->row(r), t);
      double kl = 0.0;
      for (std::int64_t c = 0; c < classes; ++c) {
        const auto i = static_cast<std::size_t>(c);
        if (pt[i] > 0.0) kl += pt[i] * (std::log(pt[i]) - std::log(std::max(ps[i], 1e-300)));
        grad[i] += loss.kd_weight * t * (ps[i] - pt[i]);
      }
      total += loss.kd_weight * t * t * kl;
    }
    for (std::int64_t c = 0; c < classes; ++c) {
      g[c] = static_cast<float>(loss.scale * grad[static_cast<std::size_t>(c)] * inv_b);
    }
  }
  out.loss = loss.scale * total * inv_b;
  if (!std::isfinite(out.loss)) throw NumericError("loss is not finite");
  return out;
}

Tensor forward(const ModelSpec& spec, const ModelWeights& weights, const Tensor& images) {
  DenseMlpBackend mlp(weights);
  return encoder_forward(spec, weights, mlp, images, {}, false).logits;
}

CaptureResult forward_with_capture(const ModelSpec& spec, const ModelWeights& weights, const Tensor& images,
                                   const std::vector<int>& layers, std::span<const std::int64_t> image_ids,
                                   std::span<const int> labels) {
  DenseMlpBackend mlp(weights);
  CaptureResult result;
  CaptureRequest req;
  req.layers = layers;
  req.labels = labels;
  req.out = &result.records;
  result.logits = encoder_forward(spec, weights, mlp, images, image_ids, false, &req).logits;
  return result;
}

GradientResult backward(const ModelSpec& spec, const ModelWeights& weights, const Tensor& images,
                        std::span<const int> labels, const LossSpec& loss, const Tensor* teacher_logits) {
  DenseMlpBackend mlp(weights);
  auto fwd = encoder_forward(spec, weights, mlp, images, {}, true);
  auto lr = compute_loss(fwd.logits, labels, loss, teacher_logits);
  GradientResult out;
  out.grads = weights.zeros_like();
  out.loss = lr.loss;
  encoder_backward(spec, weights, mlp, *fwd.cache, lr.grad_logits, out.grads,
                   [&](int l) -> MlpParams& { return out.grads.blocks[static_cast<std::size_t>(l)].mlp; });
  out.logits = std::move(fwd.logits);
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (std::int64_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    int best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace moex
