#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "moex/error.hpp"
#include "moex/finetune.hpp"
#include "moex/rng.hpp"
#include "moex/train.hpp"
#include "oracles.hpp"

using namespace moex;
using namespace moex::testing;


TEST(Finetune, ZeroEpochsLeavesModelUnchanged) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 1);
  const MoeModel m = assemble(spec, w, random_experts(spec, w, {0, 1}, 4, 2));
  FinetuneConfig cfg;
  cfg.epochs = 0;
  EXPECT_TRUE(finetune(m, w, random_dataset(spec, 8, 3), cfg).identical(m));
}

TEST(Finetune, ConfigValidation) {
  FinetuneConfig cfg;
  cfg.kd_weight = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.temperature = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Finetune, ZeroKdWeightGivesCrossEntropyGradient) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 4);
  const Tensor images = random_images(spec, 4, 5);
  const std::vector<int> labels{0, 1, 2, 3};
  const Tensor teacher = forward(spec, random_weights(spec, 6), images);
  FinetuneConfig cfg;
  cfg.kd_weight = 0.0;
  const auto g = moe_backward(MoeModel::dense(spec, w), images, labels, cfg.loss(), &teacher);
  const auto ref = backward(spec, w, images, labels, LossSpec::cross_entropy());
  EXPECT_NEAR(g.loss, ref.loss, 1e-9);
  std::vector<const Tensor*> a, b;
  g.dense.for_each([&](const std::string&, const Tensor& t) { a.push_back(&t); });
  ref.grads.for_each([&](const std::string&, const Tensor& t) { b.push_back(&t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(max_abs_diff(*a[i], *b[i]), 1e-6f);
}

TEST(Finetune, FrozenRouteGradientsOnCompactW1) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 7);
  MoeModel m = assemble(spec, w, random_experts(spec, w, {0, 1}, 4, 8));
  const Tensor images = random_images(spec, 3, 9);
  const std::vector<int> labels{4, 0, 2};
  const auto g = moe_backward(m, images, labels, LossSpec::cross_entropy());
  std::vector<Tensor*> params;
  std::vector<const Tensor*> grads;
  for (int l : m.converted_layers()) {
    params.push_back(&m.layers[static_cast<std::size_t>(l)]->compact.w1);
    grads.push_back(&g.moe[static_cast<std::size_t>(l)].w1);
  }
  const auto r = frozen_route_fd_check(m, g, images, labels, LossSpec::cross_entropy(), nullptr, params, grads, 200, 10);
  EXPECT_LT(r.loss_gap, 1e-5);
  EXPECT_GE(r.pass_rate(), 0.99);
  for (const auto& f : r.failures) ADD_FAILURE() << f;
}

TEST(Finetune, FrozenRouteGradientsAllParametersWithDistillation) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 11);
  MoeModel m = assemble(spec, w, random_experts(spec, w, {1}, 5, 12));
  const Tensor images = random_images(spec, 3, 13);
  const std::vector<int> labels{1, 1, 3};
  const Tensor teacher = forward(spec, random_weights(spec, 14), images);
  const LossSpec loss = LossSpec::combined(0.5, 2.0);
  const auto g = moe_backward(m, images, labels, loss, &teacher);
  std::vector<Tensor*> params;
  std::vector<const Tensor*> grads;
  collect_params(m, g, params, grads);
  const auto r = frozen_route_fd_check(m, g, images, labels, loss, &teacher, params, grads, 300, 15);
  EXPECT_LT(r.loss_gap, 1e-5);
  EXPECT_GE(r.pass_rate(), 0.99);
  for (const auto& f : r.failures) ADD_FAILURE() << f;
}

TEST(Finetune, FullCoverageTrajectoryMatchesDense) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 16);
  const ModelWeights teacher = random_weights(spec, 17);
  const Dataset data = random_dataset(spec, 16, 18);
  const MoeModel moe = assemble(spec, w, full_coverage_experts(spec, w, {0, 1}, 19));
  const MoeModel dense = MoeModel::dense(spec, w);

  const std::vector<int> labels(data.labels.begin(), data.labels.begin() + 4);
  std::vector<std::int64_t> first{0, 1, 2, 3};
  const Tensor images = data.gather(first);
  const Tensor t_logits = forward(spec, teacher, images);
  const auto gm = moe_backward(moe, images, labels, LossSpec::combined(0.5, 2.0), &t_logits);
  const auto gd = moe_backward(dense, images, labels, LossSpec::combined(0.5, 2.0), &t_logits);
  EXPECT_NEAR(gm.loss, gd.loss, 1e-5);
  for (int l = 0; l < 2; ++l) {
    const auto& a = gm.moe[static_cast<std::size_t>(l)];
    const auto& b = gd.dense.blocks[static_cast<std::size_t>(l)].mlp;
    EXPECT_LE(max_abs_diff(a.w1, b.w1), 1e-5f);
    EXPECT_LE(max_abs_diff(a.w2, b.w2), 1e-5f);
    EXPECT_LE(max_abs_diff(a.b1, b.b1), 1e-5f);
  }
  EXPECT_LE(max_abs_diff(gm.dense.head_w, gd.dense.head_w), 1e-5f);

  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.seed = 20;
  std::vector<double> lm, ld;
  const MoeModel fm = finetune(moe, teacher, data, cfg, nullptr, [&](const FinetuneEpoch& e) { lm.push_back(e.train_loss); });
  const MoeModel fd = finetune(dense, teacher, data, cfg, nullptr, [&](const FinetuneEpoch& e) { ld.push_back(e.train_loss); });
  ASSERT_EQ(lm.size(), 3u);
  ASSERT_EQ(ld.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(lm[i], ld[i], 1e-5);
  EXPECT_LT(max_abs_diff(moe_forward(fm, images), moe_forward(fd, images)), 1e-4f);
}

TEST(Finetune, RouterMeansFrozenByDefault) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 21);
  const MoeModel m = assemble(spec, w, random_experts(spec, w, {0, 1}, 4, 22));
  FinetuneConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  const MoeModel out = finetune(m, w, random_dataset(spec, 8, 23), cfg);
  for (int l : m.converted_layers()) {
    EXPECT_TRUE(out.layers[static_cast<std::size_t>(l)]->means.identical(m.layers[static_cast<std::size_t>(l)]->means));
    EXPECT_FALSE(out.layers[static_cast<std::size_t>(l)]->compact.w1.identical(m.layers[static_cast<std::size_t>(l)]->compact.w1));
  }
  cfg.update_router_means = true;
  const MoeModel moved = finetune(m, w, random_dataset(spec, 8, 23), cfg);
  bool changed = false;
  for (int l : m.converted_layers()) {
    const auto& means = moved.layers[static_cast<std::size_t>(l)]->means;
    changed |= !means.identical(m.layers[static_cast<std::size_t>(l)]->means);
    for (std::int64_t r = 0; r < means.rows(); ++r) {
      double n = 0.0;
      for (float v : means.row(r)) n += static_cast<double>(v) * v;
      EXPECT_NEAR(n, 1.0, 1e-5);
    }
  }
  EXPECT_TRUE(changed);
}

TEST(Finetune, NanLossAborts) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 24);
  const MoeModel m = assemble(spec, w, random_experts(spec, w, {0}, 3, 25));
  Dataset data = random_dataset(spec, 4, 26);
  data.images[5] = std::nanf("");
  FinetuneConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  EXPECT_THROW(finetune(m, w, data, cfg), NumericError);
}

TEST(Evaluate, ConstantClassScoresItsFrequency) {
  const ModelSpec spec = tiny_spec();
  ModelWeights w = random_weights(spec, 27);
  w.head_w.fill(0.0f);
  w.head_b.fill(0.0f);
  w.head_b[2] = 5.0f;
  Dataset data = random_dataset(spec, 20, 28);
  for (int i = 0; i < 20; ++i) data.labels[static_cast<std::size_t>(i)] = i < 7 ? 2 : 0;
  const auto r = evaluate(spec, w, data);
  EXPECT_DOUBLE_EQ(r.top1, 7.0 / 20.0);
  EXPECT_EQ(r.correct, 7);
  EXPECT_EQ(r.total, 20);
  EXPECT_DOUBLE_EQ(evaluate(MoeModel::dense(spec, w), data).top1, 7.0 / 20.0);
}

TEST(Evaluate, RepeatableAndBatchSizeIndependent) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 29);
  const Dataset data = random_dataset(spec, 30, 30);
  const auto a = evaluate(spec, w, data, 7);
  const auto b = evaluate(spec, w, data, 128);
  EXPECT_EQ(a.correct, b.correct);
  EXPECT_NEAR(a.loss, b.loss, 1e-9);
  const auto again = evaluate(spec, w, data, 7);
  EXPECT_EQ(again.top1, a.top1);
  EXPECT_EQ(again.loss, a.loss);
}

TEST(Evaluate, EmptyDatasetRejected) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 31);
  Dataset empty = random_dataset(spec, 1, 32).subset(std::vector<std::int64_t>{});
  EXPECT_THROW(evaluate(spec, w, empty), ValidationError);
}

TEST(Evaluate, FullCoverageAccuracyEqualsDense) {
  const ModelSpec spec = tiny_spec();
  for (std::uint64_t s = 0; s < 3; ++s) {
    const ModelWeights w = random_weights(spec, 33 + s);
    const Dataset data = random_dataset(spec, 40, 40 + s);
    const MoeModel m = assemble(spec, w, full_coverage_experts(spec, w, {0, 1}, 50 + s));
    EXPECT_EQ(evaluate(m, data).correct, evaluate(spec, w, data).correct);
  }
}

TEST(Evaluate, TraceCarriesClassLabels) {
  const ModelSpec spec = tiny_spec();
  const ModelWeights w = random_weights(spec, 60);
  const Dataset data = random_dataset(spec, 6, 61);
  const MoeModel m = assemble(spec, w, random_experts(spec, w, {0}, 3, 62));
  const auto r = evaluate(m, data, true);
  ASSERT_EQ(static_cast<int>(r.trace.events.size()), 6 * spec.seq_len());
  for (const auto& e : r.trace.events) EXPECT_EQ(e.class_label, data.labels[static_cast<std::size_t>(e.image_id)]);
}
