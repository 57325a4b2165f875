#include "moex/analysis.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "moex/error.hpp"
#include "moex/finetune.hpp"
#include "moex/pipeline.hpp"

namespace moex {

std::int64_t RoutingStats::total() const {
  std::int64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

namespace {

std::vector<double> normalize_counts(const std::vector<std::int64_t>& counts) {
  std::int64_t total = 0;
  for (auto c : counts) total += c;
  std::vector<double> out(counts.size(), 0.0);
  if (total == 0) return out;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  }
  return out;
}

}  // namespace

std::vector<double> RoutingStats::fractions() const { return normalize_counts(counts); }

std::vector<double> RoutingStats::class_fractions(int cls) const {
  auto it = class_counts.find(cls);
  if (it == class_counts.end()) {
    throw ValidationError("class " + std::to_string(cls) + " has no routed tokens at layer " + std::to_string(layer));
  }
  return normalize_counts(it->second);
}

std::vector<RoutingStats> routing_distribution(const RoutingTrace& trace, const RoutingFilter& filter) {
  if (trace.events.empty()) throw ValidationError("routing trace is empty");
  std::set<int> seen_classes;
  std::map<int, int> max_expert;
  for (const auto& ev : trace.events) {
    if (ev.expert < 0) throw ValidationError("negative expert id in routing trace");
    if (filter.num_classes >= 0 && (ev.class_label < 0 || ev.class_label >= filter.num_classes)) {
      throw ValidationError("routing trace holds class " + std::to_string(ev.class_label) + " outside [0, " +
                            std::to_string(filter.num_classes) + ")");
    }
    seen_classes.insert(ev.class_label);
    auto [it, fresh] = max_expert.emplace(ev.layer, ev.expert);
    if (!fresh) it->second = std::max(it->second, ev.expert);
  }
  for (int c : filter.classes) {
    const bool known = filter.num_classes >= 0 ? (c >= 0 && c < filter.num_classes) : seen_classes.count(c) > 0;
    if (!known) throw ValidationError("unknown class id " + std::to_string(c) + " in routing filter");
  }
  const std::set<int> wanted(filter.classes.begin(), filter.classes.end());

  std::map<int, RoutingStats> by_layer;
  for (auto [layer, top] : max_expert) {
    int k = top + 1;
    if (layer >= 0 && layer < static_cast<int>(filter.experts_per_layer.size())) {
      const int declared = filter.experts_per_layer[static_cast<std::size_t>(layer)];
      if (declared < k) {
        throw ValidationError("layer " + std::to_string(layer) + " routes to expert " + std::to_string(top) +
                              " but has " + std::to_string(declared) + " experts");
      }
      k = declared;
    }
    auto& s = by_layer[layer];
    s.layer = layer;
    s.counts.assign(static_cast<std::size_t>(k), 0);
    for (int c : seen_classes) {
      if (wanted.empty() || wanted.count(c)) s.class_counts[c].assign(static_cast<std::size_t>(k), 0);
    }
  }
  for (const auto& ev : trace.events) {
    if (!wanted.empty() && !wanted.count(ev.class_label)) continue;
    auto& s = by_layer[ev.layer];
    ++s.counts[static_cast<std::size_t>(ev.expert)];
    ++s.class_counts[ev.class_label][static_cast<std::size_t>(ev.expert)];
  }
  std::vector<RoutingStats> out;
  for (auto& [layer, s] : by_layer) out.push_back(std::move(s));
  return out;
}

std::vector<double> load_balance_curve(const std::vector<double>& fractions) {
  std::vector<double> out = fractions;
  std::stable_sort(out.begin(), out.end(), std::greater<>());
  return out;
}

std::vector<double> load_balance_curve(const RoutingStats& stats) { return load_balance_curve(stats.fractions()); }

double class_overlap(const RoutingStats& stats, int class_a, int class_b) {
  const auto a = stats.class_fractions(class_a);
  const auto b = stats.class_fractions(class_b);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return std::clamp(0.5 * d, 0.0, 1.0);
}

std::vector<double> group_fractions(const RoutingStats& stats, const std::vector<int>& classes) {
  if (classes.empty()) throw ValidationError("class group is empty");
  std::vector<double> out(static_cast<std::size_t>(stats.num_experts()), 0.0);
  for (int c : classes) {
    const auto f = stats.class_fractions(c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += f[i];
  }
  for (auto& v : out) v /= static_cast<double>(classes.size());
  return out;
}

SimilarityMatrix similarity_matrix(const MoeModel& model, int layer) {
  if (!model.converted(layer)) {
    throw ValidationError("layer " + std::to_string(layer) + " is dense and has no expert means");
  }
  const auto& ml = *model.layers[static_cast<std::size_t>(layer)];
  SimilarityMatrix m;
  m.layer = layer;
  m.k = ml.num_experts();
  m.values.assign(static_cast<std::size_t>(m.k * m.k), 0.0);
  for (int i = 0; i < m.k; ++i) {
    for (int j = i; j < m.k; ++j) {
      const auto a = ml.means.row(i);
      const auto b = ml.means.row(j);
      double dot = 0.0;
      for (std::size_t t = 0; t < a.size(); ++t) dot += static_cast<double>(a[t]) * b[t];
      dot = std::clamp(dot, -1.0, 1.0);
      m.values[static_cast<std::size_t>(i * m.k + j)] = dot;
      m.values[static_cast<std::size_t>(j * m.k + i)] = dot;
    }
  }
  return m;
}

std::vector<int> expert_count_table(const MoeModel& model) {
  std::vector<int> out(static_cast<std::size_t>(model.spec.num_layers), 0);
  for (int l : model.converted_layers()) out[static_cast<std::size_t>(l)] = model.layers[static_cast<std::size_t>(l)]->num_experts();
  return out;
}

// ---------------------------------------------------------------------------
// Stability

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

StabilityResult stability_experiment(const ModelSpec& spec, const ModelWeights& weights, const Dataset& pool,
                                     const Dataset& eval, const StabilityConfig& config) {
  if (config.sample_sizes.empty() || config.seeds.empty()) throw ConfigError("stability needs sample sizes and seeds");
  config.clustering.validate();
  config.extraction.validate();
  const int tokens_per_image = spec.seq_len() - (config.capture.include_class_token ? 0 : 1);
  for (auto size : config.sample_sizes) {
    if (size < 1 || size > pool.size()) {
      throw ConfigError("stability sample size " + std::to_string(size) + " outside [1, " +
                        std::to_string(pool.size()) + "]");
    }
    config.clustering.resolve(size * tokens_per_image);
  }
  StabilityResult result;
  for (auto size : config.sample_sizes) {
    StabilitySummary summary;
    summary.sample_size = size;
    std::vector<double> top1s;
    std::vector<std::vector<double>> ks(static_cast<std::size_t>(spec.num_layers));
    for (auto seed : config.seeds) {
      Rng rng(seed);
      const auto picked = rng.sample_without_replacement(static_cast<int>(pool.size()), static_cast<int>(size));
      const std::vector<std::int64_t> images(picked.begin(), picked.end());
      const auto acts = capture_activations(spec, weights, pool, images, config.capture);
      const auto clusters = cluster_layers(acts, config.clustering);
      const auto experts = extract_experts(acts, clusters, config.extraction);
      const auto model = assemble(spec, weights, experts, config.metric, seed);
      StabilityRun run;
      run.sample_size = size;
      run.seed = seed;
      run.top1 = evaluate(model, eval).top1;
      run.experts_per_layer = expert_count_table(model);
      top1s.push_back(run.top1);
      for (std::size_t l = 0; l < ks.size(); ++l) ks[l].push_back(run.experts_per_layer[l]);
      result.runs.push_back(std::move(run));
    }
    std::tie(summary.top1_mean, summary.top1_std) = mean_std(top1s);
    for (const auto& k : ks) {
      auto [m, s] = mean_std(k);
      summary.experts_mean.push_back(m);
      summary.experts_std.push_back(s);
    }
    result.summaries.push_back(std::move(summary));
  }
  return result;
}

std::string StabilityResult::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "size,seed,top1";
  const std::size_t layers = runs.empty() ? 0 : runs.front().experts_per_layer.size();
  for (std::size_t l = 0; l < layers; ++l) os << ",k_layer" << l;
  os << '\n';
  for (const auto& r : runs) {
    os << r.sample_size << ',' << r.seed << ',' << r.top1;
    for (int k : r.experts_per_layer) os << ',' << k;
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Patch export

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

void put_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_u32(out, static_cast<std::uint32_t>(
                   crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace

std::string encode_png(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("PNG export needs a [1|3, H, W] image, got " + shape_to_string(image.shape()));
  }
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string raw;
  raw.reserve(static_cast<std::size_t>(h * (1 + w * c)));
  for (std::int64_t y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const float v = std::clamp(image[(ch * h + y) * w + x], 0.0f, 1.0f);
        raw.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
    }
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(packed_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), Z_BEST_COMPRESSION) != Z_OK) {
    throw IoError("zlib failed to compress PNG data");
  }
  packed.resize(packed_size);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(w));
  put_u32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);                   // bit depth
  ihdr.push_back(c == 3 ? 2 : 0);      // truecolor or grayscale
  ihdr.append(3, '\0');                // compression, filter, interlace
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", packed);
  put_chunk(png, "IEND", "");
  return png;
}

std::vector<ExportedPatch> export_expert_patches(const MoeModel& model, const Dataset& data, int layer, int expert,
                                                 int max_patches, const std::filesystem::path& out_dir) {
  if (!model.converted(layer)) throw ValidationError("layer " + std::to_string(layer) + " has no experts");
  const int k = model.layers[static_cast<std::size_t>(layer)]->num_experts();
  if (expert < 0 || expert >= k) {
    throw ValidationError("expert " + std::to_string(expert) + " does not exist at layer " + std::to_string(layer) +
                          " (" + std::to_string(k) + " experts)");
  }
  if (max_patches < 0) throw ConfigError("max_patches must be non-negative");
  std::vector<ExportedPatch> out;
  if (max_patches == 0) return out;

  const auto trace = evaluate(model, data, true).trace;
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const int p = model.spec.patch_size, grid = model.spec.grid(), ch = data.channels();
  const int size = data.image_size();
  for (const auto& ev : trace.events) {
    if (static_cast<int>(out.size()) >= max_patches) break;
    if (ev.layer != layer || ev.expert != expert || ev.token_index == 0) continue;
    const int patch = ev.token_index - 1;
    const int py = (patch / grid) * p, px = (patch % grid) * p;
    Tensor img({ch, size, size});
    const float* src = data.images.data() + ev.image_id * ch * size * size;
    std::copy(src, src + img.numel(), img.data());
    const Tensor pixels = denormalize(img, data.stats);
    Tensor crop({ch, p, p});
    for (int c = 0; c < ch; ++c) {
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          crop[(c * p + y) * p + x] = pixels[(c * size + py + y) * size + px + x];
        }
      }
    }
    ExportedPatch ep{ev.image_id, ev.token_index, out_dir / (std::to_string(layer) + "_" + std::to_string(expert) + "_" +
                                                            std::to_string(ev.image_id) + "_" +
                                                            std::to_string(ev.token_index) + ".png")};
    std::ofstream f(ep.path, std::ios::binary);
    const auto png = encode_png(crop);
    f.write(png.data(), static_cast<std::streamsize>(png.size()));
    if (!f) throw IoError("failed to write " + ep.path.string());
    out.push_back(std::move(ep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

std::string routing_stats_csv(const std::vector<RoutingStats>& stats) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,class,expert,count,fraction\n";
  for (const auto& s : stats) {
    const auto f = s.fractions();
    for (int e = 0; e < s.num_experts(); ++e) {
      os << s.layer << ",all," << e << ',' << s.counts[static_cast<std::size_t>(e)] << ',' << f[static_cast<std::size_t>(e)]
         << '\n';
    }
    for (const auto& [cls, counts] : s.class_counts) {
      const auto cf = normalize_counts(counts);
      for (int e = 0; e < s.num_experts(); ++e) {
        os << s.layer << ',' << cls << ',' << e << ',' << counts[static_cast<std::size_t>(e)] << ','
           << cf[static_cast<std::size_t>(e)] << '\n';
      }
    }
  }
  return os.str();
}

std::string similarity_csv(const SimilarityMatrix& m) {
  std::ostringstream os;
  os.precision(17);
  for (int i = 0; i < m.k; ++i) {
    for (int j = 0; j < m.k; ++j) os << (j ? "," : "") << m.at(i, j);
    os << '\n';
  }
  return os.str();
}

std::string expert_counts_csv(const std::vector<int>& counts) {
  std::ostringstream os;
  os << "layer,k\n";
  for (std::size_t l = 0; l < counts.size(); ++l) os << l << ',' << counts[l] << '\n';
  return os.str();
}

}  // namespace moex
