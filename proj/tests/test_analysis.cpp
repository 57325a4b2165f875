#include <gtest/gtest.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "moex/analysis.hpp"
#include "moex/error.hpp"
#include "moex/finetune.hpp"
#include "moex/rng.hpp"
#include "oracles.hpp"

using namespace moex;
using namespace moex::testing;

namespace {

RoutingTrace make_trace(const std::vector<std::tuple<int, int, int>>& layer_class_expert) {
  RoutingTrace t;
  std::int64_t id = 0;
  for (const auto& [l, c, e] : layer_class_expert) t.events.push_back({l, 1, id++, c, e});
  return t;
}

RoutingTrace random_trace(std::uint64_t seed, int layers, int classes, int experts, int n) {
  Rng rng(seed);
  RoutingTrace t;
  for (int i = 0; i < n; ++i) {
    t.events.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(layers))), static_cast<int>(rng.below(5)),
                        static_cast<std::int64_t>(rng.below(100)), static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))),
                        static_cast<int>(rng.below(static_cast<std::uint64_t>(experts)))});
  }
  return t;
}

// Minimal PNG reader: 8-bit, filter type 0 only.
struct DecodedPng {
  int width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;
};

std::uint32_t be32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(s[at + static_cast<std::size_t>(i)]);
  return v;
}

DecodedPng decode_png(const std::string& bytes) {
  DecodedPng out;
  EXPECT_EQ(bytes.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
  std::string idat;
  std::size_t at = 8;
  while (at + 12 <= bytes.size()) {
    const auto len = be32(bytes, at);
    const std::string type = bytes.substr(at + 4, 4);
    const std::string data = bytes.substr(at + 8, len);
    const auto crc = static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(bytes.data() + at + 4), len + 4));
    EXPECT_EQ(crc, be32(bytes, at + 8 + len)) << type;
    if (type == "IHDR") {
      out.width = static_cast<int>(be32(data, 0));
      out.height = static_cast<int>(be32(data, 4));
      EXPECT_EQ(static_cast<int>(data[8]), 8);
      out.channels = data[9] == 2 ? 3 : 1;
    } else if (type == "IDAT") {
      idat += data;
    }
    at += 12 + len;
  }
  const std::size_t stride = static_cast<std::size_t>(out.width * out.channels) + 1;
  std::vector<unsigned char> raw(stride * static_cast<std::size_t>(out.height));
  uLongf size = static_cast<uLongf>(raw.size());
  EXPECT_EQ(uncompress(raw.data(), &size, reinterpret_cast<const Bytef*>(idat.data()), static_cast<uLong>(idat.size())), Z_OK);
  for (int y = 0; y < out.height; ++y) {
    EXPECT_EQ(raw[static_cast<std::size_t>(y) * stride], 0);
    out.pixels.insert(out.pixels.end(), raw.begin() + static_cast<std::ptrdiff_t>(y * stride + 1),
                      raw.begin() + static_cast<std::ptrdiff_t>((y + 1) * stride));
  }
  return out;
}

}  // namespace

TEST(RoutingDistribution, AllToExpertZero) {
  RoutingFilter f;
  f.experts_per_layer = {4};
  const auto s = routing_distribution(make_trace({{0, 0, 0}, {0, 1, 0}, {0, 1, 0}}), f);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].fractions(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(RoutingDistribution, UniformIsExact) {
  std::vector<std::tuple<int, int, int>> ev;
  for (int r = 0; r < 3; ++r) {
    for (int e = 0; e < 7; ++e) ev.emplace_back(2, r, e);
  }
  const auto s = routing_distribution(make_trace(ev));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].layer, 2);
  for (double v : s[0].fractions()) EXPECT_EQ(v, 1.0 / 7.0);
  for (double v : load_balance_curve(s[0])) EXPECT_EQ(v, 1.0 / 7.0);
}

TEST(RoutingDistribution, MatchesCsvRecount) {
  const auto trace = random_trace(1, 3, 6, 5, 4000);
  std::map<std::pair<int, int>, std::int64_t> overall;
  std::map<std::tuple<int, int, int>, std::int64_t> per_class;
  std::istringstream in(trace.to_csv());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<long long> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(std::stoll(cell));
    ASSERT_EQ(f.size(), 5u);
    ++overall[{static_cast<int>(f[0]), static_cast<int>(f[4])}];
    ++per_class[{static_cast<int>(f[0]), static_cast<int>(f[3]), static_cast<int>(f[4])}];
  }
  const auto stats = routing_distribution(trace);
  ASSERT_EQ(stats.size(), 3u);
  for (const auto& s : stats) {
    for (int e = 0; e < s.num_experts(); ++e) {
      EXPECT_EQ(s.counts[static_cast<std::size_t>(e)], (overall[{s.layer, e}]));
      for (const auto& [cls, counts] : s.class_counts) EXPECT_EQ(counts[static_cast<std::size_t>(e)], (per_class[{s.layer, cls, e}]));
    }
  }
}

TEST(RoutingDistribution, FractionsSumToOnePerLayerAndClass) {
  const auto stats = routing_distribution(random_trace(2, 4, 10, 9, 3000));
  for (const auto& s : stats) {
    const auto f = s.fractions();
    EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), 1.0, 1e-9);
    for (const auto& [cls, _] : s.class_counts) {
      const auto cf = s.class_fractions(cls);
      EXPECT_NEAR(std::accumulate(cf.begin(), cf.end(), 0.0), 1.0, 1e-9);
    }
  }
}

TEST(RoutingDistribution, ClassFilterAndErrors) {
  const auto trace = make_trace({{0, 0, 0}, {0, 1, 1}, {0, 2, 2}, {0, 1, 1}});
  RoutingFilter f;
  f.classes = {1};
  const auto s = routing_distribution(trace, f);
  EXPECT_EQ(s[0].total(), 2);
  EXPECT_EQ(s[0].counts[1], 2);
  f.classes = {9};
  EXPECT_THROW(routing_distribution(trace, f), ValidationError);
  RoutingFilter bounded;
  bounded.num_classes = 2;
  EXPECT_THROW(routing_distribution(trace, bounded), ValidationError);
  EXPECT_THROW(routing_distribution(RoutingTrace{}), ValidationError);
  EXPECT_THROW(routing_distribution(trace)[0].class_fractions(7), ValidationError);
}

TEST(LoadBalance, SortsDescendingAsPermutation) {
  EXPECT_EQ(load_balance_curve(std::vector<double>{0.2, 0.5, 0.3}), (std::vector<double>{0.5, 0.3, 0.2}));
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(1 + rng.below(20));
    for (auto& x : v) x = rng.uniform();
    const auto c = load_balance_curve(v);
    EXPECT_TRUE(std::is_permutation(c.begin(), c.end(), v.begin()));
    EXPECT_TRUE(std::is_sorted(c.begin(), c.end(), std::greater<>()));
  }
}

TEST(ClassOverlap, BoundedAndZeroForIdentical) {
  const auto same = routing_distribution(make_trace({{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}}))[0];
  EXPECT_DOUBLE_EQ(class_overlap(same, 0, 1), 0.0);
  const auto disjoint = routing_distribution(make_trace({{0, 0, 0}, {0, 1, 1}}))[0];
  EXPECT_DOUBLE_EQ(class_overlap(disjoint, 0, 1), 1.0);
  for (const auto& s : routing_distribution(random_trace(4, 2, 5, 6, 2000))) {
    for (int a = 0; a < 5; ++a) {
      for (int b = 0; b < 5; ++b) {
        const double d = class_overlap(s, a, b);
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
        EXPECT_DOUBLE_EQ(d, class_overlap(s, b, a));
      }
    }
  }
  const auto g = group_fractions(same, {0, 1});
  EXPECT_DOUBLE_EQ(g[0], 0.5);
  EXPECT_THROW(group_fractions(same, {}), ValidationError);
}

TEST(Similarity, SingleExpertAndOrthogonalMeans) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 5);
  const MoeModel one = assemble(spec, w, random_experts(spec, w, {0}, 1, 6));
  ASSERT_EQ(one.layers[0]->num_experts(), 1);
  EXPECT_NEAR(similarity_matrix(one, 0).at(0, 0), 1.0, 1e-6);

  std::vector<ExpertSpec> experts;
  for (int k = 0; k < 3; ++k) {
    ExpertSpec e;
    e.layer = 1;
    e.expert_id = k;
    e.neuron_indices = {k};
    std::vector<float> mu(static_cast<std::size_t>(spec.embed_dim), 0.0f);
    mu[static_cast<std::size_t>(k)] = 1.0f;
    e.mu = Tensor::vector(mu);
    e.raw_mean = Tensor::vector(mu);
    e.member_count = 5;
    experts.push_back(e);
  }
  const auto s = similarity_matrix(assemble(spec, w, experts), 1);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(s.at(i, j), i == j ? 1.0 : 0.0);
  }
  EXPECT_THROW(similarity_matrix(assemble(spec, w, experts), 0), ValidationError);
}

TEST(Similarity, MatchesNormalizedDotOracle) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 7);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto experts = random_experts(spec, w, {0}, 8, seed);
    const auto s = similarity_matrix(assemble(spec, w, experts), 0);
    for (int i = 0; i < s.k; ++i) {
      for (int j = 0; j < s.k; ++j) {
        const auto a = experts[static_cast<std::size_t>(i)].raw_mean.values();
        const auto b = experts[static_cast<std::size_t>(j)].raw_mean.values();
        double dot = 0, na = 0, nb = 0;
        for (std::size_t d = 0; d < a.size(); ++d) {
          dot += static_cast<double>(a[d]) * b[d];
          na += static_cast<double>(a[d]) * a[d];
          nb += static_cast<double>(b[d]) * b[d];
        }
        EXPECT_NEAR(s.at(i, j), dot / std::sqrt(na * nb), 1e-6);
        EXPECT_EQ(s.at(i, j), s.at(j, i));
      }
    }
  }
}

TEST(ExpertCounts, DenseAndPartialModels) {
  ModelSpec spec = tiny_spec();
  spec.num_layers = 4;
  const ModelWeights w = random_weights(spec, 8);
  EXPECT_EQ(expert_count_table(MoeModel::dense(spec, w)), (std::vector<int>{0, 0, 0, 0}));
  const auto experts = random_experts(spec, w, {2, 3}, 6, 9);
  std::vector<int> recount(4, 0);
  for (const auto& e : experts) ++recount[static_cast<std::size_t>(e.layer)];
  EXPECT_EQ(expert_count_table(assemble(spec, w, experts)), recount);
  EXPECT_EQ(recount[0] + recount[1], 0);
  EXPECT_EQ(expert_counts_csv({0, 3}), "layer,k\n0,0\n1,3\n");
}

TEST(Stability, SingleSeedHasZeroSpreadAndRepeats) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 10);
  const Dataset pool = random_dataset(spec, 60, 11);
  const Dataset eval = random_dataset(spec, 20, 12);
  StabilityConfig cfg;
  cfg.sample_sizes = {30, 40};
  cfg.seeds = {5};
  cfg.clustering.min_cluster_size_fraction = 0.05;
  const auto a = stability_experiment(spec, w, pool, eval, cfg);
  ASSERT_EQ(a.summaries.size(), 2u);
  for (const auto& s : a.summaries) {
    EXPECT_EQ(s.top1_std, 0.0);
    for (double v : s.experts_std) EXPECT_EQ(v, 0.0);
  }
  cfg.seeds = {5, 5};
  const auto b = stability_experiment(spec, w, pool, eval, cfg);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(b.summaries[i].top1_mean, a.summaries[i].top1_mean);
    EXPECT_EQ(b.summaries[i].top1_std, 0.0);
  }
  EXPECT_EQ(b.runs[0].experts_per_layer, b.runs[1].experts_per_layer);
  EXPECT_EQ(a.to_csv().substr(0, 14), "size,seed,top1");
}

TEST(ExportPatches, ZeroBudgetWritesNothing) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 13);
  const MoeModel m = assemble(spec, w, random_experts(spec, w, {0}, 3, 14));
  const auto dir = std::filesystem::path(temp_path("export_zero"));
  std::filesystem::remove_all(dir);
  EXPECT_TRUE(export_expert_patches(m, random_dataset(spec, 4, 15), 0, 0, 0, dir).empty());
  EXPECT_FALSE(std::filesystem::exists(dir) && !std::filesystem::is_empty(dir));
  EXPECT_THROW(export_expert_patches(m, random_dataset(spec, 4, 15), 0, 9, 1, dir), ValidationError);
  EXPECT_THROW(export_expert_patches(m, random_dataset(spec, 4, 15), 1, 0, 1, dir), ValidationError);
}

TEST(ExportPatches, UnusedExpertWritesNothing) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 16);
  const Dataset data = random_dataset(spec, 6, 17);
  std::vector<ExpertSpec> experts;
  for (std::uint64_t seed = 18; experts.size() != 2; ++seed) experts = random_experts(spec, w, {0}, 2, seed);
  // Equal means tie on every token and ties go to the lower index.
  experts[1].mu = experts[0].mu;
  experts[1].raw_mean = experts[0].raw_mean;
  const MoeModel m = assemble(spec, w, experts);
  const auto stats = routing_distribution(evaluate(m, data, true).trace, {{}, -1, expert_count_table(m)});
  ASSERT_EQ(stats[0].counts[1], 0);
  const auto dir = std::filesystem::path(temp_path("export_unused"));
  std::filesystem::remove_all(dir);
  EXPECT_TRUE(export_expert_patches(m, data, 0, 1, 10, dir).empty());
  EXPECT_TRUE(!std::filesystem::exists(dir) || std::filesystem::is_empty(dir));
}

TEST(ExportPatches, FilesMatchTraceAndPixels) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 19);
  Dataset data = random_dataset(spec, 8, 20);
  data.stats.mean = {0.5f, 0.4f, 0.3f};
  data.stats.stddev = {0.2f, 0.25f, 0.3f};
  const MoeModel m = assemble(spec, w, random_experts(spec, w, {1}, 3, 21));
  const auto trace = evaluate(m, data, true).trace;
  std::map<int, int> busiest;
  for (const auto& e : trace.events) {
    if (e.layer == 1 && e.token_index > 0) ++busiest[e.expert];
  }
  const int expert = std::max_element(busiest.begin(), busiest.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
  const auto dir = std::filesystem::path(temp_path("export_trace"));
  std::filesystem::remove_all(dir);
  const auto out = export_expert_patches(m, data, 1, expert, 5, dir);
  ASSERT_EQ(static_cast<int>(out.size()), std::min(5, busiest[expert]));
  std::set<std::pair<std::int64_t, int>> routed;
  for (const auto& e : trace.events) {
    if (e.layer == 1 && e.expert == expert) routed.emplace(e.image_id, e.token_index);
  }
  const int p = spec.patch_size, grid = spec.grid(), size = spec.image_size;
  for (const auto& ep : out) {
    EXPECT_TRUE(routed.count(std::make_pair(ep.image_id, ep.token_index)));
    EXPECT_GT(ep.token_index, 0);
    std::ifstream f(ep.path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto png = decode_png(bytes);
    ASSERT_EQ(png.width, p);
    ASSERT_EQ(png.height, p);
    ASSERT_EQ(png.channels, 3);
    const int py = (ep.token_index - 1) / grid * p, px = (ep.token_index - 1) % grid * p;
    for (int y = 0; y < p; ++y) {
      for (int x = 0; x < p; ++x) {
        for (int c = 0; c < 3; ++c) {
          const double z = data.images[((ep.image_id * 3 + c) * size + py + y) * size + px + x];
          const double v = std::clamp(z * data.stats.stddev[static_cast<std::size_t>(c)] + data.stats.mean[static_cast<std::size_t>(c)], 0.0, 1.0);
          EXPECT_NEAR(png.pixels[static_cast<std::size_t>((y * p + x) * 3 + c)], v * 255.0, 0.51);
        }
      }
    }
  }
}

TEST(Csv, RoutingStatsAndSimilarityLayouts) {
  const auto stats = routing_distribution(make_trace({{0, 0, 0}, {0, 1, 1}}));
  const auto csv = routing_stats_csv(stats);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,class,expert,count,fraction");
  EXPECT_NE(csv.find("0,all,0,1,0.5"), std::string::npos);
  SimilarityMatrix sm{0, 2, {1, 0.5, 0.5, 1}};
  EXPECT_EQ(similarity_csv(sm), "1,0.5\n0.5,1\n");
}
