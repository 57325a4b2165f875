#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "moex/dataset.hpp"
#include "moex/error.hpp"
#include "moex/io.hpp"
#include "moex/rng.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace moex;
using namespace moex::testing;

namespace {

const std::string kIdx = std::string(MOEX_TEST_DATA_DIR) + "/idx/";

std::string with_header(const std::string& bytes, const nlohmann::json& header) {
  return with_container_header(bytes, header.dump());
}

template <typename Fn>
FormatFault fault_of(Fn&& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.fault();
  }
  ADD_FAILURE() << "no FormatError";
  return FormatFault::BadHeader;
}

}  // namespace

TEST(ModelFile, DenseRoundTripIsBitwise) {
  const ModelSpec spec = tiny_spec();
  const MoeModel m = MoeModel::dense(spec, random_weights(spec, 1));
  const auto path = temp_path("dense.moec");
  save_model(path, m);
  EXPECT_TRUE(load_model(path).identical(m));
}

TEST(ModelFile, MoeRoundTripIsBitwise) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const MoeModel m = assemble(spec, w, random_experts(spec, w, {0, 1}, 6, seed));
    const MoeModel back = model_from_bytes(model_to_bytes(m));
    EXPECT_TRUE(back.identical(m));
    EXPECT_EQ(model_to_bytes(back), model_to_bytes(m));
    const Tensor images = random_images(spec, 3, 10 + seed);
    EXPECT_TRUE(moe_forward(back, images).identical(moe_forward(m, images)));
  }
}

TEST(ModelFile, ManifestIsAlignedAndNonOverlapping) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 3);
  const std::string bytes = model_to_bytes(assemble(spec, w, random_experts(spec, w, {1}, 4, 4)));
  EXPECT_EQ(bytes.substr(0, 4), "MOEC");
  const auto text = container_header(bytes);
  const auto hlen = text.size();
  const auto header = nlohmann::json::parse(text);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& t : header.at("tensors")) {
    const auto off = t.at("offset").get<std::uint64_t>(), len = t.at("length").get<std::uint64_t>();
    EXPECT_EQ(off % 64, 0u);
    EXPECT_GE(off, 16 + hlen);
    EXPECT_LE(off + len, bytes.size());
    spans.emplace_back(off, off + len);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) EXPECT_LE(spans[i - 1].second, spans[i].first);
}

TEST(ModelFile, TruncationNamesTheTensor) {
  const ModelSpec spec = tiny_spec();
  const std::string bytes = model_to_bytes(MoeModel::dense(spec, random_weights(spec, 5)));
  const auto header = nlohmann::json::parse(container_header(bytes));
  std::string last;
  std::uint64_t end = 0;
  for (const auto& t : header.at("tensors")) {
    const auto e = t.at("offset").get<std::uint64_t>() + t.at("length").get<std::uint64_t>();
    if (e > end) {
      end = e;
      last = t.at("name").get<std::string>();
    }
  }
  ASSERT_EQ(end, bytes.size());
  try {
    model_from_bytes(std::string_view(bytes).substr(0, bytes.size() - 1));
    FAIL() << "truncated file loaded";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.fault(), FormatFault::Truncated);
    EXPECT_NE(std::string(e.what()).find(last), std::string::npos) << e.what();
  }
}

TEST(ModelFile, UnknownHeaderKeysAreTolerated) {
  const ModelSpec spec = tiny_spec();
  const MoeModel m = MoeModel::dense(spec, random_weights(spec, 6));
  const std::string bytes = model_to_bytes(m);
  auto header = nlohmann::json::parse(container_header(bytes));
  header["written_by_future_version"] = {{"x", 1}};
  header["spec"]["future_field"] = true;
  const std::string out = with_header(bytes, header);
  EXPECT_TRUE(model_from_bytes(out).identical(m));
}

TEST(ModelFile, MagicVersionAndManifestFaults) {
  const ModelSpec spec = tiny_spec();
  const std::string bytes = model_to_bytes(MoeModel::dense(spec, random_weights(spec, 7)));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(fault_of([&] { model_from_bytes(bad); }), FormatFault::BadMagic);
  bad = bytes;
  bad[4] = 99;
  EXPECT_EQ(fault_of([&] { model_from_bytes(bad); }), FormatFault::UnsupportedVersion);
  EXPECT_EQ(fault_of([&] { model_from_bytes(""); }), FormatFault::Truncated);
  EXPECT_EQ(fault_of([&] { model_from_bytes(activations_to_bytes(spec, {})); }), FormatFault::BadMagic);

  auto header = nlohmann::json::parse(container_header(bytes));
  auto two = header;
  two["tensors"][1]["offset"] = two["tensors"][0]["offset"];
  EXPECT_EQ(fault_of([&] { model_from_bytes(with_header(bytes, two)); }), FormatFault::OverlappingTensors);
  auto huge = header;
  huge["tensors"][0]["offset"] = std::uint64_t{1} << 62;
  const auto f = fault_of([&] { model_from_bytes(with_header(bytes, huge)); });
  EXPECT_TRUE(f == FormatFault::ManifestOverflow || f == FormatFault::Truncated);
  auto garbage = header;
  garbage.erase("tensors");
  EXPECT_EQ(fault_of([&] { model_from_bytes(with_header(bytes, garbage)); }), FormatFault::BadHeader);
}

TEST(ModelFile, MissingFileIsIoError) {
  EXPECT_THROW(load_model(temp_path("does-not-exist.moec")), IoError);
}

TEST(CaptureFile, RoundTripIsBitwise) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 8);
  const Dataset data = random_dataset(spec, 5, 9);
  const std::vector<std::int64_t> ids{0, 2, 4};
  CaptureConfig cfg;
  const auto acts = capture_activations(spec, w, data, ids, cfg);
  const auto path = temp_path("capture.moea");
  save_activations(path, spec, acts);
  ModelSpec back_spec;
  const auto back = load_activations(path, &back_spec);
  EXPECT_EQ(back_spec.embed_dim, spec.embed_dim);
  ASSERT_EQ(back.size(), acts.size());
  for (std::size_t l = 0; l < acts.size(); ++l) {
    EXPECT_EQ(back[l].layer, acts[l].layer);
    EXPECT_TRUE(back[l].x.identical(acts[l].x));
    EXPECT_TRUE(back[l].y.identical(acts[l].y));
    EXPECT_EQ(back[l].image_ids, acts[l].image_ids);
    EXPECT_EQ(back[l].token_index, acts[l].token_index);
    EXPECT_EQ(back[l].class_label, acts[l].class_label);
  }
}

TEST(ExpertJson, RoundTripIsExact) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 10);
  const auto experts = random_experts(spec, w, {0, 1}, 5, 11);
  const auto back = experts_from_json(experts_to_json(experts));
  ASSERT_EQ(back.size(), experts.size());
  for (std::size_t i = 0; i < experts.size(); ++i) {
    EXPECT_EQ(back[i].layer, experts[i].layer);
    EXPECT_EQ(back[i].expert_id, experts[i].expert_id);
    EXPECT_EQ(back[i].neuron_indices, experts[i].neuron_indices);
    EXPECT_TRUE(back[i].mu.identical(experts[i].mu));
    EXPECT_TRUE(back[i].raw_mean.identical(experts[i].raw_mean));
    EXPECT_EQ(back[i].member_count, experts[i].member_count);
  }
  EXPECT_THROW(experts_from_json("{not json"), FormatError);
}

TEST(Idx, FourImageFixture) {
  const Dataset d = load_idx(kIdx + "four-images.idx3-ubyte", kIdx + "four-labels.idx1-ubyte");
  ASSERT_EQ(d.images.shape(), (std::vector<std::int64_t>{4, 1, 5, 5}));
  EXPECT_EQ(d.labels, (std::vector<int>{3, 1, 4, 1}));
  double mean = 0.0;
  for (int i = 0; i < 4; ++i) {
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 5; ++x) mean += ((60 * i + 11 * y + 3 * x) % 256) / 255.0;
    }
  }
  mean /= 100.0;
  EXPECT_NEAR(d.stats.mean[0], mean, 1e-6);
  for (int i = 0; i < 4; ++i) {
    Tensor img({1, 5, 5});
    std::memcpy(img.data(), d.images.data() + i * 25, 25 * sizeof(float));
    const Tensor px = denormalize(img, d.stats);
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 5; ++x) EXPECT_NEAR(px[y * 5 + x], ((60 * i + 11 * y + 3 * x) % 256) / 255.0, 1e-6);
    }
  }
}

TEST(Idx, CountMismatchAndEmptyFile) {
  EXPECT_EQ(fault_of([&] { load_idx(kIdx + "four-images.idx3-ubyte", kIdx + "three-labels.idx1-ubyte"); }),
            FormatFault::CountMismatch);
  const auto empty = temp_path("empty.idx");
  write_file(empty, "");
  EXPECT_EQ(fault_of([&] { load_idx(empty, kIdx + "four-labels.idx1-ubyte"); }), FormatFault::Truncated);
  EXPECT_EQ(fault_of([&] { load_idx(kIdx + "four-labels.idx1-ubyte", kIdx + "four-labels.idx1-ubyte"); }),
            FormatFault::BadMagic);
}

TEST(Synth, FixedSeedIsBitIdenticalAndPrefixStable) {
  SynthConfig cfg;
  const Dataset a = synth_dataset(cfg, 50, Rng(3));
  const Dataset b = synth_dataset(cfg, 50, Rng(3));
  EXPECT_TRUE(a.images.identical(b.images));
  EXPECT_EQ(a.labels, b.labels);
  const Dataset c = synth_dataset(cfg, 80, Rng(3), &a.stats);
  for (std::int64_t i = 0; i < 50 * a.images.numel() / 50; ++i) ASSERT_EQ(c.images[i], a.images[i]);
  EXPECT_FALSE(synth_dataset(cfg, 50, Rng(4)).images.identical(a.images));
}

TEST(Synth, ImagesCorrelateWithOwnTemplate) {
  SynthConfig cfg;
  const Dataset d = synth_dataset(cfg, 200, Rng(5));
  const auto plane = static_cast<std::int64_t>(cfg.channels) * cfg.image_size * cfg.image_size;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    Tensor img({cfg.channels, cfg.image_size, cfg.image_size});
    std::memcpy(img.data(), d.images.data() + i * plane, static_cast<std::size_t>(plane) * sizeof(float));
    const Tensor px = denormalize(img, d.stats);
    const int cls = d.labels[static_cast<std::size_t>(i)];
    EXPECT_GE(pixel_correlation(px.values(), synth_template(cfg, cls).values()), 0.9) << "image " << i << " class " << cls;
  }
}

TEST(Synth, NearestTemplateIsOwnClass) {
  SynthConfig cfg;
  cfg.num_classes = 20;
  std::vector<Tensor> templates;
  for (int c = 0; c < cfg.num_classes; ++c) templates.push_back(synth_template(cfg, c));
  for (int a = 0; a < cfg.num_classes; ++a) {
    for (int b = a + 1; b < cfg.num_classes; ++b) EXPECT_GT(max_abs_diff(templates[static_cast<std::size_t>(a)], templates[static_cast<std::size_t>(b)]), 0.1f);
  }
  const Dataset d = synth_dataset(cfg, 200, Rng(7));
  const auto plane = static_cast<std::int64_t>(cfg.channels) * cfg.image_size * cfg.image_size;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    Tensor img({cfg.channels, cfg.image_size, cfg.image_size});
    std::memcpy(img.data(), d.images.data() + i * plane, static_cast<std::size_t>(plane) * sizeof(float));
    const Tensor px = denormalize(img, d.stats);
    int best = -1;
    double best_r = -2.0;
    for (int c = 0; c < cfg.num_classes; ++c) {
      const double r = pixel_correlation(px.values(), templates[static_cast<std::size_t>(c)].values());
      if (r > best_r) best_r = r, best = c;
    }
    EXPECT_EQ(best, d.labels[static_cast<std::size_t>(i)]) << "image " << i;
  }
}

TEST(Synth, SingleImage) {
  SynthConfig cfg;
  const Dataset d = synth_dataset(cfg, 1, Rng(6));
  EXPECT_EQ(d.size(), 1);
  EXPECT_EQ(d.labels.size(), 1u);
  EXPECT_EQ(d.num_classes(), 10);
}

TEST(Synth, PearsonOracle) {
  const std::vector<float> a{1, 2, 3, 4}, b{2, 4, 6, 8}, c{4, 3, 2, 1};
  EXPECT_NEAR(pixel_correlation(a, b), 1.0, 1e-12);
  EXPECT_NEAR(pixel_correlation(a, c), -1.0, 1e-12);
}
