// moex: command line driver for the expert-extraction pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moex/analysis.hpp"
#include "moex/error.hpp"
#include "moex/io.hpp"
#include "moex/pipeline.hpp"

namespace fs = std::filesystem;
using namespace moex;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kConfig = 3, kIo = 4, kFormat = 5, kNumeric = 6 };

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config: return kConfig;
    case ErrorCategory::Io: return kIo;
    case ErrorCategory::Format: return kFormat;
    case ErrorCategory::Numeric: return kNumeric;
    default: return kOther;
  }
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> min_cluster_frac;
  std::optional<double> extract_pct;
  std::optional<std::string> criterion;
  std::optional<std::string> metric;
  std::optional<std::string> layers;
  std::string out = "out";

  std::string model, teacher, capture, experts;
  int layer = -1;
  int expert = 0;
  int max_patches = -1;
  std::string preset;
};

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.min_cluster_frac) c.clustering.min_cluster_size_fraction = *o.min_cluster_frac;
  if (o.extract_pct) c.extraction.extraction_percentage = *o.extract_pct;
  if (o.criterion) c.extraction.criterion = parse_criterion(*o.criterion);
  if (o.metric) c.metric = parse_metric(*o.metric);
  if (o.layers) c.capture.layers = parse_layer_range(*o.layers, c.model.num_layers);
  c.validate();
  return c;
}

void log(const std::string& s) { std::cerr << s << '\n'; }

fs::path out_dir(const Options& o) {
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create output directory " + o.out + ": " + ec.message());
  return o.out;
}

std::string pick(const std::string& explicit_path, const fs::path& fallback) {
  return explicit_path.empty() ? fallback.string() : explicit_path;
}

void write_summary(const fs::path& dir, const std::string& stage, const json& j) {
  const auto path = dir / (stage + "_summary.json");
  write_file(path.string(), j.dump(2) + "\n");
  log("wrote " + path.string());
}

json cost_json(const MoeModel& model, const RoutingTrace& trace) {
  Report r;
  fill_costs(r, model, trace);
  return {{"macs_reduction", r.macs_reduction}, {"params_reduction", r.params_reduction},
          {"dense_macs", r.dense_macs},         {"moe_macs", r.moe_macs},
          {"dense_params", r.dense_params},     {"moe_params", r.moe_params},
          {"experts_per_layer", r.experts_per_layer}};
}

void check_spec(const RunConfig& c, const ModelSpec& spec, const std::string& what) {
  if (!(c.model == spec)) throw ConfigError(what + " was built for a different model spec than the config describes");
}

// ---------------------------------------------------------------------------

void cmd_train(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto data = load_datasets(c);
  json epochs = json::array();
  const auto w = run_train(c, data.train, [&](const EpochStats& s) {
    log("epoch " + std::to_string(s.epoch) + " loss " + std::to_string(s.train_loss) + " top1 " +
        std::to_string(s.train_top1));
    epochs.push_back({{"epoch", s.epoch}, {"train_loss", s.train_loss}, {"train_top1", s.train_top1}});
  });
  const auto path = (dir / "dense.moec").string();
  save_model(path, MoeModel::dense(c.model, w));
  write_file((dir / "run.conf").string(), to_config_text(c));
  const auto ev = evaluate(c.model, w, data.test);
  write_summary(dir, "train", {{"model", path}, {"dense_top1", ev.top1}, {"test_loss", ev.loss}, {"epochs", epochs},
                               {"parameters", w.parameter_count()}});
}

void cmd_capture(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto dense = load_model(pick(o.model, dir / "dense.moec"));
  check_spec(c, dense.spec, "the dense model");
  const auto data = load_datasets(c);
  const auto acts = run_capture(c, dense.weights, data.train);
  const auto path = (dir / "capture.moea").string();
  save_activations(path, c.model, acts);
  json layers = json::array();
  for (const auto& a : acts) layers.push_back({{"layer", a.layer}, {"tokens", a.size()}});
  write_summary(dir, "capture", {{"capture", path}, {"images", c.capture_image_count()}, {"layers", layers}});
}

void cmd_extract(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  ModelSpec spec;
  const auto acts = load_activations(pick(o.capture, dir / "capture.moea"), &spec);
  check_spec(c, spec, "the capture file");
  json layers = json::array();
  const auto clusters = cluster_layers(acts, c.clustering);
  for (const auto& lc : clusters) {
    write_file((dir / ("clusters_" + std::to_string(lc.layer) + ".json")).string(), lc.assignment.to_json());
    layers.push_back({{"layer", lc.layer},
                      {"min_cluster_size", lc.params.min_cluster_size},
                      {"min_samples", lc.params.min_samples},
                      {"k", lc.assignment.k},
                      {"noise", lc.assignment.noise_count()}});
    log("layer " + std::to_string(lc.layer) + ": " + std::to_string(lc.assignment.k) + " clusters");
  }
  ExtractionConfig ec = c.extraction;
  ec.seed = c.stage_seed("extraction");
  const auto experts = extract_experts(acts, clusters, ec);
  const auto path = (dir / "experts.json").string();
  write_file(path, experts_to_json(experts));
  write_summary(dir, "extract", {{"experts", path}, {"total_experts", experts.size()}, {"layers", layers}});
}

void cmd_assemble(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto dense = load_model(pick(o.model, dir / "dense.moec"));
  check_spec(c, dense.spec, "the dense model");
  const auto experts = experts_from_json(read_file(pick(o.experts, dir / "experts.json")));
  const auto moe = assemble(dense.spec, dense.weights, experts, c.metric, c.stage_seed("routing"));
  const auto path = (dir / "moe.moec").string();
  save_model(path, moe);
  write_summary(dir, "assemble", {{"model", path}, {"experts_per_layer", expert_count_table(moe)}});
}

void cmd_eval(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto path = pick(o.model, dir / "moe.moec");
  const auto model = load_model(path);
  check_spec(c, model.spec, "the model");
  const auto data = load_datasets(c);
  const auto r = evaluate(model, data.test, true);
  write_file((dir / "trace.csv").string(), r.trace.to_csv());
  json j = cost_json(model, r.trace);
  j["model"] = path;
  j["top1"] = r.top1;
  j["loss"] = r.loss;
  j["correct"] = r.correct;
  j["total"] = r.total;
  write_summary(dir, "eval", j);
}

void cmd_finetune(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto student = load_model(pick(o.model, dir / "moe.moec"));
  const auto teacher = load_model(pick(o.teacher, dir / "dense.moec"));
  check_spec(c, student.spec, "the student model");
  if (!teacher.converted_layers().empty() || !(teacher.spec == student.spec)) {
    throw ConfigError("the teacher must be the dense model the student was extracted from");
  }
  const auto data = load_datasets(c);
  FinetuneConfig fc = c.finetune;
  fc.seed = c.stage_seed("finetune");
  Dataset train = data.train;
  if (c.finetune_images > 0 && c.finetune_images < train.size()) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(c.finetune_images));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
    train = train.subset(idx);
  }
  std::ofstream jsonl(dir / "finetune.jsonl");
  const auto tuned = finetune(student, teacher.weights, train, fc, &data.test, [&](const FinetuneEpoch& e) {
    const auto line = to_jsonl(e);
    jsonl << line << '\n';
    log(line);
  });
  const auto path = (dir / "finetuned.moec").string();
  save_model(path, tuned);
  const auto r = evaluate(tuned, data.test, true);
  json j = cost_json(tuned, r.trace);
  j["model"] = path;
  j["top1"] = r.top1;
  write_summary(dir, "finetune", j);
}

void cmd_analyze(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  std::string path = o.model;
  if (path.empty()) path = fs::exists(dir / "finetuned.moec") ? (dir / "finetuned.moec").string() : (dir / "moe.moec").string();
  const auto model = load_model(path);
  check_spec(c, model.spec, "the model");
  const auto data = load_datasets(c);
  const auto r = evaluate(model, data.test, true);
  const auto counts = expert_count_table(model);
  RoutingFilter filter;
  filter.num_classes = c.model.num_classes;
  filter.experts_per_layer = counts;
  const auto stats = routing_distribution(r.trace, filter);
  write_file((dir / "routing_stats.csv").string(), routing_stats_csv(stats));
  write_file((dir / "expert_counts.csv").string(), expert_counts_csv(counts));

  std::ostringstream balance, overlap;
  balance.precision(17);
  overlap.precision(17);
  balance << "layer,rank,fraction\n";
  overlap << "layer,group,class_a,class_b,tv_distance\n";
  for (const auto& s : stats) {
    const auto curve = load_balance_curve(s);
    for (std::size_t i = 0; i < curve.size(); ++i) balance << s.layer << ',' << i << ',' << curve[i] << '\n';
    for (std::size_t g = 0; g < c.class_groups.size(); ++g) {
      const auto& group = c.class_groups[g];
      for (std::size_t a = 0; a < group.size(); ++a) {
        for (std::size_t b = a + 1; b < group.size(); ++b) {
          if (!s.class_counts.count(group[a]) || !s.class_counts.count(group[b])) continue;
          overlap << s.layer << ',' << g << ',' << group[a] << ',' << group[b] << ','
                  << class_overlap(s, group[a], group[b]) << '\n';
        }
      }
    }
  }
  write_file((dir / "load_balance.csv").string(), balance.str());
  write_file((dir / "class_overlap.csv").string(), overlap.str());
  for (int l : model.converted_layers()) {
    write_file((dir / ("similarity_" + std::to_string(l) + ".csv")).string(), similarity_csv(similarity_matrix(model, l)));
  }
  write_summary(dir, "analysis", {{"model", path}, {"top1", r.top1}, {"experts_per_layer", counts}});
}

void cmd_ablate(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto dense = load_model(pick(o.model, dir / "dense.moec"));
  check_spec(c, dense.spec, "the dense model");
  ModelSpec spec;
  const auto acts = load_activations(pick(o.capture, dir / "capture.moea"), &spec);
  check_spec(c, spec, "the capture file");
  const auto data = load_datasets(c);
  const double dense_top1 = evaluate(c.model, dense.weights, data.test).top1;
  const auto clusters = cluster_layers(acts, c.clustering);
  std::vector<AblationPreset> presets = all_presets();
  if (!o.preset.empty()) presets = {parse_preset(o.preset)};
  json rows = json::array();
  ExperimentHooks hooks;
  hooks.log = log;
  for (auto p : presets) {
    const auto r = run_preset(c, p, data, dense.weights, dense_top1, acts, clusters, hooks);
    write_file((dir / (std::string("ablation_") + to_string(p) + ".json")).string(), r.to_json() + "\n");
    rows.push_back(json::parse(r.to_json()));
  }
  write_summary(dir, "ablate", {{"presets", rows}});
}

void cmd_stability(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto dense = load_model(pick(o.model, dir / "dense.moec"));
  check_spec(c, dense.spec, "the dense model");
  const auto data = load_datasets(c);
  StabilityConfig sc;
  sc.sample_sizes = c.stability_sizes;
  sc.seeds = c.stability_seeds;
  sc.capture = c.capture;
  sc.capture.layers = c.capture_layers();
  sc.clustering = c.clustering;
  sc.extraction = c.extraction;
  sc.metric = c.metric;
  const auto res = stability_experiment(c.model, dense.weights, data.train, data.test, sc);
  write_file((dir / "stability.csv").string(), res.to_csv());
  json rows = json::array();
  for (const auto& s : res.summaries) {
    rows.push_back({{"size", s.sample_size},
                    {"top1_mean", s.top1_mean},
                    {"top1_std", s.top1_std},
                    {"experts_mean", s.experts_mean},
                    {"experts_std", s.experts_std}});
  }
  write_summary(dir, "stability", {{"sizes", rows}});
}

void cmd_export(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  std::string path = o.model;
  if (path.empty()) path = fs::exists(dir / "finetuned.moec") ? (dir / "finetuned.moec").string() : (dir / "moe.moec").string();
  const auto model = load_model(path);
  check_spec(c, model.spec, "the model");
  int layer = o.layer;
  if (layer < 0) {
    const auto conv = model.converted_layers();
    if (conv.empty()) throw ValidationError("the model has no converted layer to export from");
    layer = conv.back();
  }
  const auto data = load_datasets(c);
  const int max = o.max_patches >= 0 ? o.max_patches : c.export_max_patches;
  const auto patches = export_expert_patches(model, data.test, layer, o.expert, max, dir / "patches");
  json files = json::array();
  for (const auto& p : patches) {
    files.push_back({{"image_id", p.image_id}, {"token_index", p.token_index}, {"path", p.path.string()}});
  }
  write_summary(dir, "export", {{"layer", layer}, {"expert", o.expert}, {"patches", files}});
}

void cmd_report(const Options& o) {
  const auto c = resolve_config(o);
  const auto dir = out_dir(o);
  const auto dense = load_model(pick(o.teacher, dir / "dense.moec"));
  const auto extracted = load_model(pick(o.model, dir / "moe.moec"));
  check_spec(c, dense.spec, "the dense model");
  check_spec(c, extracted.spec, "the MoE model");
  const auto data = load_datasets(c);
  Report r;
  r.preset = "report";
  r.seed = c.seed;
  r.dense_top1 = evaluate(c.model, dense.weights, data.test).top1;
  const auto ev = evaluate(extracted, data.test, true);
  r.acc_retention = ev.top1;
  r.top1 = ev.top1;
  fill_costs(r, extracted, ev.trace);
  if (fs::exists(dir / "finetuned.moec")) {
    const auto tuned = load_model((dir / "finetuned.moec").string());
    const auto ft = evaluate(tuned, data.test, true);
    r.top1 = ft.top1;
    fill_costs(r, tuned, ft.trace);
  }
  if (fs::exists(dir / "capture_summary.json")) {
    const auto summary = json::parse(read_file((dir / "capture_summary.json").string()));
    for (const auto& l : summary.at("layers")) {
      r.capture_tokens = std::max<std::int64_t>(r.capture_tokens, l.at("tokens").get<std::int64_t>());
    }
  }
  if (fs::exists(dir / "finetune.jsonl")) {
    std::istringstream lines(read_file((dir / "finetune.jsonl").string()));
    std::string line;
    while (std::getline(lines, line)) {
      if (!line.empty()) r.finetune_top1.push_back(json::parse(line).at("eval_top1").get<double>());
    }
  }
  const auto path = dir / "report.json";
  write_file(path.string(), r.to_json() + "\n");
  std::cout << r.to_json() << '\n';
  log("wrote " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Extract mixture-of-experts layers from a trained vision transformer"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "key = value config file");
  app.add_option("--seed", o.seed, "master seed");
  app.add_option("--min-cluster-frac", o.min_cluster_frac, "HDBSCAN minimum cluster size as a fraction of tokens");
  app.add_option("--extract-pct", o.extract_pct, "variance fraction covered by each expert");
  app.add_option("--criterion", o.criterion, "neuron selection")->check(CLI::IsMember({"variance", "magnitude", "random"}));
  app.add_option("--metric", o.metric, "routing metric")->check(CLI::IsMember({"cosine", "euclidean"}));
  app.add_option("--layers", o.layers, "layers to capture, e.g. 2-3 or 0,3");
  app.add_option("--out", o.out, "output directory")->capture_default_str();

  struct Cmd {
    const char* name;
    const char* help;
    void (*fn)(const Options&);
  };
  const Cmd cmds[] = {
      {"train", "train the dense model", cmd_train},
      {"capture", "record MLP activations of the training images", cmd_capture},
      {"extract", "cluster activations and select expert neurons", cmd_extract},
      {"assemble", "build the MoE model from extracted experts", cmd_assemble},
      {"eval", "evaluate a model and write its routing trace", cmd_eval},
      {"finetune", "distill the dense model into the MoE model", cmd_finetune},
      {"analyze", "routing distributions, similarity matrices, expert counts", cmd_analyze},
      {"ablate", "run the four ablation presets", cmd_ablate},
      {"stability", "repeat extraction across sample sizes and seeds", cmd_stability},
      {"export-patches", "write image patches routed to one expert", cmd_export},
      {"report", "summarize accuracy and cost into report.json", cmd_report},
  };
  void (*selected)(const Options&) = nullptr;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->callback([&selected, fn = c.fn] { selected = fn; });
    const std::string name = c.name;
    if (name == "capture" || name == "assemble" || name == "eval" || name == "finetune" || name == "analyze" ||
        name == "ablate" || name == "stability" || name == "export-patches" || name == "report") {
      sub->add_option("--model", o.model, "model file");
    }
    if (name == "finetune" || name == "report") sub->add_option("--teacher", o.teacher, "dense model file");
    if (name == "extract" || name == "ablate") sub->add_option("--capture", o.capture, "capture file");
    if (name == "assemble") sub->add_option("--experts", o.experts, "expert list");
    if (name == "ablate") sub->add_option("--preset", o.preset, "run one preset only");
    if (name == "export-patches") {
      sub->add_option("--layer", o.layer, "layer (default: last converted)");
      sub->add_option("--expert", o.expert, "expert index");
      sub->add_option("--max-patches", o.max_patches, "maximum number of files");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  try {
    selected(o);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.category()) << "): " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
