#include "moex/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moex/analysis.hpp"
#include "moex/error.hpp"
#include "moex/io.hpp"

namespace moex {

// ---------------------------------------------------------------------------
// Config

void RunConfig::validate() const {
  model.validate();
  train.validate();
  clustering.validate();
  extraction.validate();
  finetune.validate();
  if (data.kind != "synth" && data.kind != "idx") throw ConfigError("data.kind must be synth or idx, got " + data.kind);
  if (data.kind == "synth") {
    if (data.train_size < 1 || data.test_size < 1) throw ConfigError("data.train_size and data.test_size must be positive");
    if (model.num_classes > SynthConfig::kMaxClasses) {
      throw ConfigError("synthetic data supports at most " + std::to_string(SynthConfig::kMaxClasses) + " classes");
    }
    if (capture_image_count() > data.train_size) {
      throw ConfigError("capture needs " + std::to_string(capture_image_count()) + " images but data.train_size is " +
                        std::to_string(data.train_size));
    }
    if (finetune_images > data.train_size) throw ConfigError("finetune.images exceeds data.train_size");
  } else if (data.train_images.empty() || data.train_labels.empty() || data.test_images.empty() ||
             data.test_labels.empty()) {
    throw ConfigError("idx data needs data.train_images, data.train_labels, data.test_images, data.test_labels");
  }
  if (capture_images < 1 && capture_tokens < 1) throw ConfigError("capture.images or capture.tokens must be positive");
  if (capture.batch_size < 1) throw ConfigError("capture.batch_size must be positive");
  for (int l : capture.layers) {
    if (l < 0 || l >= model.num_layers) throw ConfigError("capture layer " + std::to_string(l) + " out of range");
  }
  if (metric == RoutingMetric::Random) throw ConfigError("routing.metric must be cosine or euclidean");
  if (finetune_images < 0) throw ConfigError("finetune.images must be non-negative");
  if (export_max_patches < 0) throw ConfigError("export.max_patches must be non-negative");
  for (const auto& g : class_groups) {
    for (int c : g) {
      if (c < 0 || c >= model.num_classes) throw ConfigError("class group entry " + std::to_string(c) + " out of range");
    }
  }
  clustering.resolve(capture_token_count());
}

std::int64_t RunConfig::capture_image_count() const {
  if (capture_tokens > 0) {
    const std::int64_t per = model.seq_len() - (capture.include_class_token ? 0 : 1);
    return (capture_tokens + per - 1) / per;
  }
  return capture_images;
}

std::int64_t RunConfig::capture_token_count() const {
  return capture_image_count() * (model.seq_len() - (capture.include_class_token ? 0 : 1));
}

std::vector<int> RunConfig::capture_layers() const {
  if (!capture.layers.empty()) return capture.layers;
  std::vector<int> all(static_cast<std::size_t>(model.num_layers));
  for (int l = 0; l < model.num_layers; ++l) all[static_cast<std::size_t>(l)] = l;
  return all;
}

std::uint64_t RunConfig::stage_seed(const std::string& stage) const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : stage) h = (h ^ ch) * 1099511628211ull;
  return hash_combine({seed, h});
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("bad value for " + key + ": \"" + v + "\"");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": \"" + v + "\"");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<T>(key, item));
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& v, const char* sep = ",") {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? sep : "") << v[i];
  return os.str();
}

}  // namespace

std::vector<int> parse_layer_range(const std::string& text, int num_layers) {
  const std::string t = trim(text);
  std::vector<int> out;
  if (t.empty() || t == "all") return out;
  std::stringstream ss(t);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    const auto dash = part.find('-');
    int lo, hi;
    if (dash == std::string::npos) {
      lo = hi = parse_number<int>("layers", part);
    } else {
      lo = parse_number<int>("layers", trim(part.substr(0, dash)));
      hi = parse_number<int>("layers", trim(part.substr(dash + 1)));
    }
    if (lo > hi || lo < 0 || hi >= num_layers) {
      throw ConfigError("layer range \"" + part + "\" outside [0, " + std::to_string(num_layers - 1) + "]");
    }
    for (int l = lo; l <= hi; ++l) out.push_back(l);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void apply_setting(RunConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto i = [&] { return parse_number<int>(key, v); };
  auto i64 = [&] { return parse_number<std::int64_t>(key, v); };
  auto u64 = [&] { return parse_number<std::uint64_t>(key, v); };
  auto d = [&] { return parse_number<double>(key, v); };
  auto f = [&] { return parse_number<float>(key, v); };
  auto b = [&] { return parse_bool(key, v); };

  if (key == "seed") c.seed = u64();
  else if (key == "data.kind") c.data.kind = v;
  else if (key == "data.train_images") c.data.train_images = v;
  else if (key == "data.train_labels") c.data.train_labels = v;
  else if (key == "data.test_images") c.data.test_images = v;
  else if (key == "data.test_labels") c.data.test_labels = v;
  else if (key == "data.train_size") c.data.train_size = i64();
  else if (key == "data.test_size") c.data.test_size = i64();
  else if (key == "data.max_shift") c.data.synth.max_shift = f();
  else if (key == "data.brightness_jitter") c.data.synth.brightness_jitter = f();
  else if (key == "data.noise_std") c.data.synth.noise_std = f();
  else if (key == "model.image_size") c.model.image_size = i();
  else if (key == "model.patch_size") c.model.patch_size = i();
  else if (key == "model.channels") c.model.channels = i();
  else if (key == "model.embed_dim") c.model.embed_dim = i();
  else if (key == "model.num_layers") c.model.num_layers = i();
  else if (key == "model.num_heads") c.model.num_heads = i();
  else if (key == "model.mlp_ratio") c.model.mlp_ratio = d();
  else if (key == "model.num_classes") c.model.num_classes = i();
  else if (key == "model.layer_norm_eps") c.model.layer_norm_eps = f();
  else if (key == "train.epochs") c.train.epochs = i();
  else if (key == "train.batch_size") c.train.batch_size = i();
  else if (key == "train.lr") c.train.optimizer.lr = d();
  else if (key == "train.weight_decay") c.train.optimizer.weight_decay = d();
  else if (key == "train.beta1") c.train.optimizer.beta1 = d();
  else if (key == "train.beta2") c.train.optimizer.beta2 = d();
  else if (key == "train.eps") c.train.optimizer.eps = d();
  else if (key == "capture.images") c.capture_images = i64();
  else if (key == "capture.tokens") c.capture_tokens = i64();
  else if (key == "capture.layers") c.capture.layers = parse_layer_range(v, c.model.num_layers);
  else if (key == "capture.class_token") c.capture.include_class_token = b();
  else if (key == "capture.batch_size") c.capture.batch_size = i();
  else if (key == "clustering.min_cluster_frac") c.clustering.min_cluster_size_fraction = d();
  else if (key == "clustering.min_samples") {
    if (v == "auto") c.clustering.min_samples.reset();
    else c.clustering.min_samples = i();
  }
  else if (key == "clustering.max_matrix_bytes") c.clustering.max_matrix_bytes = i64();
  else if (key == "extraction.percentage") c.extraction.extraction_percentage = d();
  else if (key == "extraction.criterion") c.extraction.criterion = parse_criterion(v);
  else if (key == "routing.metric") c.metric = parse_metric(v);
  else if (key == "finetune.epochs") c.finetune.epochs = i();
  else if (key == "finetune.batch_size") c.finetune.batch_size = i();
  else if (key == "finetune.lr") c.finetune.lr = d();
  else if (key == "finetune.weight_decay") c.finetune.weight_decay = d();
  else if (key == "finetune.temperature") c.finetune.temperature = d();
  else if (key == "finetune.kd_weight") c.finetune.kd_weight = d();
  else if (key == "finetune.update_router_means") c.finetune.update_router_means = b();
  else if (key == "finetune.router_momentum") c.finetune.router_momentum = d();
  else if (key == "finetune.train_head") c.finetune.train_head = b();
  else if (key == "finetune.images") c.finetune_images = i64();
  else if (key == "analysis.class_groups") {
    c.class_groups.clear();
    std::stringstream ss(v);
    std::string group;
    while (std::getline(ss, group, ';')) {
      auto g = parse_list<int>(key, group);
      if (!g.empty()) c.class_groups.push_back(std::move(g));
    }
  }
  else if (key == "export.max_patches") c.export_max_patches = i();
  else if (key == "stability.sizes") c.stability_sizes = parse_list<std::int64_t>(key, v);
  else if (key == "stability.seeds") c.stability_seeds = parse_list<std::uint64_t>(key, v);
  else throw ConfigError("unknown config key \"" + key + "\"");
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " has no '='");
    const auto key = trim(line.substr(0, eq));
    try {
      apply_setting(base, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

std::string to_config_text(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "seed = " << c.seed << '\n'
     << "data.kind = " << c.data.kind << '\n';
  if (!c.data.train_images.empty()) os << "data.train_images = " << c.data.train_images << '\n';
  if (!c.data.train_labels.empty()) os << "data.train_labels = " << c.data.train_labels << '\n';
  if (!c.data.test_images.empty()) os << "data.test_images = " << c.data.test_images << '\n';
  if (!c.data.test_labels.empty()) os << "data.test_labels = " << c.data.test_labels << '\n';
  os << "data.train_size = " << c.data.train_size << '\n'
     << "data.test_size = " << c.data.test_size << '\n'
     << "data.max_shift = " << c.data.synth.max_shift << '\n'
     << "data.brightness_jitter = " << c.data.synth.brightness_jitter << '\n'
     << "data.noise_std = " << c.data.synth.noise_std << '\n'
     << "model.image_size = " << c.model.image_size << '\n'
     << "model.patch_size = " << c.model.patch_size << '\n'
     << "model.channels = " << c.model.channels << '\n'
     << "model.embed_dim = " << c.model.embed_dim << '\n'
     << "model.num_layers = " << c.model.num_layers << '\n'
     << "model.num_heads = " << c.model.num_heads << '\n'
     << "model.mlp_ratio = " << c.model.mlp_ratio << '\n'
     << "model.num_classes = " << c.model.num_classes << '\n'
     << "model.layer_norm_eps = " << c.model.layer_norm_eps << '\n'
     << "train.epochs = " << c.train.epochs << '\n'
     << "train.batch_size = " << c.train.batch_size << '\n'
     << "train.lr = " << c.train.optimizer.lr << '\n'
     << "train.weight_decay = " << c.train.optimizer.weight_decay << '\n'
     << "train.beta1 = " << c.train.optimizer.beta1 << '\n'
     << "train.beta2 = " << c.train.optimizer.beta2 << '\n'
     << "train.eps = " << c.train.optimizer.eps << '\n'
     << "capture.images = " << c.capture_images << '\n'
     << "capture.tokens = " << c.capture_tokens << '\n'
     << "capture.layers = " << (c.capture.layers.empty() ? std::string("all") : join(c.capture.layers)) << '\n'
     << "capture.class_token = " << (c.capture.include_class_token ? "true" : "false") << '\n'
     << "capture.batch_size = " << c.capture.batch_size << '\n'
     << "clustering.min_cluster_frac = " << c.clustering.min_cluster_size_fraction << '\n'
     << "clustering.min_samples = "
     << (c.clustering.min_samples ? std::to_string(*c.clustering.min_samples) : std::string("auto")) << '\n'
     << "clustering.max_matrix_bytes = " << c.clustering.max_matrix_bytes << '\n'
     << "extraction.percentage = " << c.extraction.extraction_percentage << '\n'
     << "extraction.criterion = " << to_string(c.extraction.criterion) << '\n'
     << "routing.metric = " << to_string(c.metric) << '\n'
     << "finetune.epochs = " << c.finetune.epochs << '\n'
     << "finetune.batch_size = " << c.finetune.batch_size << '\n'
     << "finetune.lr = " << c.finetune.lr << '\n'
     << "finetune.weight_decay = " << c.finetune.weight_decay << '\n'
     << "finetune.temperature = " << c.finetune.temperature << '\n'
     << "finetune.kd_weight = " << c.finetune.kd_weight << '\n'
     << "finetune.update_router_means = " << (c.finetune.update_router_means ? "true" : "false") << '\n'
     << "finetune.router_momentum = " << c.finetune.router_momentum << '\n'
     << "finetune.train_head = " << (c.finetune.train_head ? "true" : "false") << '\n'
     << "finetune.images = " << c.finetune_images << '\n';
  std::vector<std::string> groups;
  for (const auto& g : c.class_groups) groups.push_back(join(g));
  os << "analysis.class_groups = " << join(groups, ";") << '\n'
     << "export.max_patches = " << c.export_max_patches << '\n'
     << "stability.sizes = " << join(c.stability_sizes) << '\n'
     << "stability.seeds = " << join(c.stability_seeds) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Stages

Datasets load_datasets(const RunConfig& config) {
  Datasets d;
  if (config.data.kind == "idx") {
    d.train = load_idx(config.data.train_images, config.data.train_labels);
    d.test = load_idx(config.data.test_images, config.data.test_labels, &d.train.stats);
    check_dataset(config.model, d.train);
    check_dataset(config.model, d.test);
    return d;
  }
  SynthConfig synth = config.data.synth;
  synth.image_size = config.model.image_size;
  synth.channels = config.model.channels;
  synth.num_classes = config.model.num_classes;
  d.train = synth_dataset(synth, config.data.train_size, Rng(config.stage_seed("data.train")));
  d.test = synth_dataset(synth, config.data.test_size, Rng(config.stage_seed("data.test")), &d.train.stats);
  return d;
}

ModelWeights run_train(const RunConfig& config, const Dataset& train,
                       const std::function<void(const EpochStats&)>& on_epoch) {
  Rng rng(config.stage_seed("train"));
  return train_base(config.model, train, config.train, rng, on_epoch);
}

std::vector<std::int64_t> capture_indices(const RunConfig& config, std::int64_t pool_size) {
  const auto count = config.capture_image_count();
  if (count > pool_size) {
    throw ConfigError("capture needs " + std::to_string(count) + " images but the training set has " +
                      std::to_string(pool_size));
  }
  Rng rng(config.stage_seed("capture"));
  const auto picked = rng.sample_without_replacement(static_cast<int>(pool_size), static_cast<int>(count));
  return {picked.begin(), picked.end()};
}

std::vector<LayerActivations> run_capture(const RunConfig& config, const ModelWeights& weights, const Dataset& train) {
  const auto idx = capture_indices(config, train.size());
  CaptureConfig cc = config.capture;
  cc.layers = config.capture_layers();
  return capture_activations(config.model, weights, train, idx, cc);
}

std::vector<LayerClustering> cluster_layers(const std::vector<LayerActivations>& acts, const ClusteringConfig& config) {
  std::vector<LayerClustering> out;
  for (const auto& a : acts) {
    LayerClustering lc;
    lc.layer = a.layer;
    lc.params = config.resolve(a.size());
    lc.assignment = hdbscan(a.y, lc.params);
    out.push_back(std::move(lc));
  }
  return out;
}

ClusterAssignment random_assignment(std::int64_t n, int k, Rng& rng) {
  if (k < 1) throw ConfigError("random assignment needs k >= 1");
  ClusterAssignment a;
  a.k = k;
  a.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : a.labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  return a;
}

std::vector<ExpertSpec> extract_experts(const std::vector<LayerActivations>& acts,
                                        const std::vector<LayerClustering>& clusters,
                                        const ExtractionConfig& config) {
  if (acts.size() != clusters.size()) throw ValidationError("one clustering per captured layer is required");
  std::vector<ExpertSpec> out;
  for (std::size_t i = 0; i < acts.size(); ++i) {
    if (acts[i].layer != clusters[i].layer) throw ValidationError("clustering and capture layers disagree");
    if (clusters[i].assignment.k == 0) continue;
    auto specs = extract_layer(acts[i], clusters[i].assignment, config);
    out.insert(out.end(), std::make_move_iterator(specs.begin()), std::make_move_iterator(specs.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::string Report::to_json() const {
  nlohmann::json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["dense_top1"] = dense_top1;
  j["acc_retention"] = acc_retention;
  j["top1"] = top1;
  j["macs_reduction"] = macs_reduction;
  j["params_reduction"] = params_reduction;
  j["dense_macs"] = dense_macs;
  j["moe_macs"] = moe_macs;
  j["dense_params"] = dense_params;
  j["moe_params"] = moe_params;
  j["capture_tokens"] = capture_tokens;
  j["experts_per_layer"] = experts_per_layer;
  j["finetune_top1"] = finetune_top1;
  return j.dump(2);
}

Report Report::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Report r;
    r.preset = j.value("preset", std::string());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.dense_top1 = j.at("dense_top1").get<double>();
    r.acc_retention = j.at("acc_retention").get<double>();
    r.top1 = j.at("top1").get<double>();
    r.macs_reduction = j.at("macs_reduction").get<double>();
    r.params_reduction = j.at("params_reduction").get<double>();
    r.dense_macs = j.at("dense_macs").get<std::int64_t>();
    r.moe_macs = j.at("moe_macs").get<double>();
    r.dense_params = j.at("dense_params").get<std::int64_t>();
    r.moe_params = j.at("moe_params").get<std::int64_t>();
    r.capture_tokens = j.value("capture_tokens", std::int64_t{0});
    r.experts_per_layer = j.value("experts_per_layer", std::vector<int>{});
    r.finetune_top1 = j.value("finetune_top1", std::vector<double>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatFault::BadHeader, std::string("report JSON: ") + e.what());
  }
}

void fill_costs(Report& report, const MoeModel& model, const RoutingTrace& trace) {
  const auto dist = routing_distribution_of(model, trace);
  const auto cost = count_costs(model, &dist);
  report.dense_macs = cost.dense_macs;
  report.moe_macs = cost.moe_macs;
  report.dense_params = cost.dense_params;
  report.moe_params = cost.moe_params;
  report.macs_reduction = cost.macs_reduction();
  report.params_reduction = cost.params_reduction();
  report.experts_per_layer = expert_count_table(model);
}

const char* to_string(AblationPreset p) noexcept {
  switch (p) {
    case AblationPreset::RandomEverything: return "random-clusters";
    case AblationPreset::Hdbscan: return "hdbscan";
    case AblationPreset::Variance: return "variance";
    case AblationPreset::Full: return "full";
  }
  return "?";
}

AblationPreset parse_preset(const std::string& s) {
  for (auto p : all_presets()) {
    if (s == to_string(p)) return p;
  }
  throw ConfigError("unknown ablation preset \"" + s + "\" (random-clusters, hdbscan, variance, full)");
}

std::vector<AblationPreset> all_presets() {
  return {AblationPreset::RandomEverything, AblationPreset::Hdbscan, AblationPreset::Variance, AblationPreset::Full};
}

namespace {

void log(const ExperimentHooks& hooks, const std::string& msg) {
  if (hooks.log) hooks.log(msg);
}

Dataset finetune_set(const RunConfig& config, const Dataset& train) {
  if (config.finetune_images <= 0 || config.finetune_images >= train.size()) return train;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(config.finetune_images));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  return train.subset(idx);
}

Report build_and_tune(const RunConfig& config, const std::string& name, const Datasets& data,
                      const ModelWeights& dense, double dense_top1, const std::vector<LayerActivations>& acts,
                      const std::vector<LayerClustering>& clusters, SelectionCriterion criterion,
                      RoutingMetric metric, const ExperimentHooks& hooks, MoeModel* extracted_out,
                      MoeModel* finetuned_out) {
  ExtractionConfig ec = config.extraction;
  ec.criterion = criterion;
  ec.seed = config.stage_seed("extraction");
  const auto experts = extract_experts(acts, clusters, ec);
  MoeModel model = assemble(config.model, dense, experts, metric, config.stage_seed("routing"));

  Report r;
  r.preset = name;
  r.seed = config.seed;
  r.dense_top1 = dense_top1;
  r.capture_tokens = acts.empty() ? 0 : acts.front().size();
  const auto eval = evaluate(model, data.test, true);
  r.acc_retention = eval.top1;
  fill_costs(r, model, eval.trace);
  log(hooks, name + ": experts per layer [" + [&] {
        std::string s;
        for (int k : r.experts_per_layer) s += (s.empty() ? "" : ",") + std::to_string(k);
        return s;
      }() + "], top1 after extraction " + std::to_string(r.acc_retention));
  if (extracted_out) *extracted_out = model;

  FinetuneConfig fc = config.finetune;
  fc.seed = config.stage_seed("finetune");
  const Dataset ft = finetune_set(config, data.train);
  MoeModel tuned = finetune(model, dense, ft, fc, &data.test, [&](const FinetuneEpoch& ep) {
    r.finetune_top1.push_back(ep.eval_top1);
    log(hooks, name + ": finetune epoch " + std::to_string(ep.epoch) + " loss " + std::to_string(ep.train_loss) +
                   " top1 " + std::to_string(ep.eval_top1));
    if (hooks.on_finetune_epoch) hooks.on_finetune_epoch(ep);
  });
  if (fc.epochs == 0) {
    r.top1 = r.acc_retention;
  } else {
    const auto after = evaluate(tuned, data.test, true);
    r.top1 = after.top1;
    fill_costs(r, tuned, after.trace);
  }
  if (finetuned_out) *finetuned_out = std::move(tuned);
  return r;
}

}  // namespace

Report run_preset(const RunConfig& config, AblationPreset preset, const Datasets& data, const ModelWeights& dense,
                  double dense_top1, const std::vector<LayerActivations>& acts,
                  const std::vector<LayerClustering>& hdbscan_clusters, const ExperimentHooks& hooks,
                  MoeModel* finetuned) {
  std::vector<LayerClustering> clusters = hdbscan_clusters;
  if (preset == AblationPreset::RandomEverything) {
    Rng rng(config.stage_seed("random-clusters"));
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      if (clusters[i].assignment.k == 0) continue;
      clusters[i].assignment = random_assignment(acts[i].size(), clusters[i].assignment.k, rng);
    }
  }
  const SelectionCriterion criterion =
      preset == AblationPreset::Variance || preset == AblationPreset::Full ? SelectionCriterion::Variance
                                                                           : SelectionCriterion::Random;
  const RoutingMetric metric = preset == AblationPreset::Full ? config.metric : RoutingMetric::Random;
  return build_and_tune(config, to_string(preset), data, dense, dense_top1, acts, clusters, criterion, metric, hooks,
                        nullptr, finetuned);
}

Report run_experiment(const RunConfig& config, const ExperimentHooks& hooks, ExperimentArtifacts* artifacts) {
  config.validate();
  const Datasets data = load_datasets(config);
  log(hooks, "training dense model on " + std::to_string(data.train.size()) + " images");
  ModelWeights dense = run_train(config, data.train, [&](const EpochStats& s) {
    log(hooks, "train epoch " + std::to_string(s.epoch) + " loss " + std::to_string(s.train_loss) + " top1 " +
                   std::to_string(s.train_top1));
  });
  const double dense_top1 = evaluate(config.model, dense, data.test).top1;
  log(hooks, "dense top1 " + std::to_string(dense_top1));
  auto acts = run_capture(config, dense, data.train);
  log(hooks, "captured " + std::to_string(acts.empty() ? 0 : acts.front().size()) + " tokens per layer");
  auto clusters = cluster_layers(acts, config.clustering);
  MoeModel extracted, tuned;
  Report r = build_and_tune(config, "experiment", data, dense, dense_top1, acts, clusters, config.extraction.criterion,
                            config.metric, hooks, &extracted, &tuned);
  if (artifacts) {
    artifacts->dense = std::move(dense);
    artifacts->activations = std::move(acts);
    artifacts->clusters = std::move(clusters);
    artifacts->extracted = std::move(extracted);
    artifacts->finetuned = std::move(tuned);
  }
  return r;
}

}  // namespace moex
