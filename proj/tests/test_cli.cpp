#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "moex/activations.hpp"
#include "moex/io.hpp"
#include "moex/pipeline.hpp"
#include "oracles.hpp"

using namespace moex;
using namespace moex::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args) {
  const std::string cmd = std::string("\"") + MOEX_CLI_PATH + "\" " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const std::string kSmoke = std::string(MOEX_CONFIG_DIR) + "/smoke.conf";

std::string fresh_dir(const std::string& name) {
  const auto d = temp_path(name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"train", "capture", "extract", "assemble", "eval", "finetune", "analyze", "ablate", "stability",
                          "export-patches", "report"}) {
    EXPECT_NE(r.output.find(sub), std::string::npos) << sub;
  }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("train --no-such-flag").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("--metric manhattan train").code, 2);
}

TEST(Cli, ConfigAndIoErrorsHaveDistinctCodes) {
  const auto bad = temp_path("bad.conf");
  write_file(bad, "model.depth = 3\n");
  EXPECT_EQ(run("--config " + bad + " train --out " + fresh_dir("cli_bad")).code, 3);
  EXPECT_EQ(run("--config " + temp_path("nope.conf") + " train").code, 4);
  EXPECT_EQ(run("--config " + kSmoke + " eval --model " + temp_path("nope.moec") + " --out " + fresh_dir("cli_io")).code, 4);
  const auto junk = temp_path("junk.moec");
  write_file(junk, "MOEC garbage");
  EXPECT_EQ(run("--config " + kSmoke + " eval --model " + junk + " --out " + fresh_dir("cli_fmt")).code, 5);
}

TEST(Cli, ExtractOnTooSmallCaptureNamesBothNumbers) {
  const RunConfig c = load_run_config(kSmoke);
  const ModelWeights w = random_weights(c.model, 1);
  const Dataset d = random_dataset(c.model, 2, 2);
  const std::vector<std::int64_t> one{0};
  CaptureConfig cc;
  const auto acts = capture_activations(c.model, w, d, one, cc);
  const auto path = temp_path("small.moea");
  save_activations(path, c.model, acts);
  const int tokens = c.model.seq_len();
  const auto r = run("--config " + kSmoke + " extract --capture " + path + " --out " + fresh_dir("cli_small"));
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find(std::to_string(tokens)), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("min_cluster_size"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("= 0"), std::string::npos) << r.output;
}

TEST(Cli, SmokePipeline) {
  const auto dir = fresh_dir("cli_smoke");
  const std::string common = "--config " + kSmoke + " ";
  for (const char* stage : {"train", "capture", "extract", "assemble", "eval", "finetune", "analyze", "report"}) {
    const auto r = run(common + stage + " --out " + dir);
    ASSERT_EQ(r.code, 0) << stage << "\n" << r.output;
  }
  for (const char* f : {"dense.moec", "capture.moea", "experts.json", "moe.moec", "trace.csv", "finetuned.moec",
                        "finetune.jsonl", "routing_stats.csv", "expert_counts.csv", "report.json", "train_summary.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(dir) / f)) << f;
  }
  const auto report = nlohmann::json::parse(read_file((fs::path(dir) / "report.json").string()));
  for (const char* key : {"macs_reduction", "params_reduction", "acc_retention", "top1", "dense_top1"}) {
    EXPECT_TRUE(report.contains(key)) << key;
  }
  const MoeModel moe = load_model((fs::path(dir) / "moe.moec").string());
  const auto experts = experts_from_json(read_file((fs::path(dir) / "experts.json").string()));
  std::vector<int> recount(static_cast<std::size_t>(moe.spec.num_layers), 0);
  for (const auto& e : experts) ++recount[static_cast<std::size_t>(e.layer)];
  EXPECT_EQ(report.at("experts_per_layer").get<std::vector<int>>(), recount);
  const RunConfig c = load_run_config(kSmoke);
  EXPECT_EQ(report.at("capture_tokens").get<std::int64_t>(), c.capture_token_count());
  EXPECT_EQ(report.at("finetune_top1").size(), static_cast<std::size_t>(c.finetune.epochs));

  int layer = -1;
  for (int l = 0; l < moe.spec.num_layers; ++l) {
    if (moe.converted(l)) layer = l;
  }
  if (layer >= 0) {
    const auto r = run(common + "export-patches --layer " + std::to_string(layer) + " --max-patches 3 --out " + dir);
    EXPECT_EQ(r.code, 0) << r.output;
  }
}
