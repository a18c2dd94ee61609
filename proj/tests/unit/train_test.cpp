// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "quadapter/data.hpp"
#include "quadapter/error.hpp"
#include "quadapter/model.hpp"
#include "quadapter/train.hpp"

namespace quadapter {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.max_seq = 32;
  c.seed = 21;
  return c;
}

Corpus random_corpus(const std::string& name, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(97, 122);
  Corpus c{name, std::vector<int>(n), Split::kTrain};
  for (int& t : c.tokens) t = tok(rng);
  return c;
}

TrainPlan quick_plan() {
  TrainPlan p;
  p.phase1.steps = 60;
  p.phase1.decay_interval = 20;
  p.phase2.steps = 5;
  p.phase2.block = 16;
  p.phase2.batch = 2;
  p.pretrain.steps = 5;
  p.pretrain.block = 16;
  p.pretrain.batch = 2;
  p.pretrain.warmup = 2;
  return p;
}

// Two-channel layer-norm-style block whose first channel carries a x100 outlier.
struct OutlierCase {
  QuadapterBlock block;
  BlockIO io;
};

OutlierCase outlier_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double factor = 100.0;
  Tensor gamma = Tensor::vector({0.8 * factor, 1.1});
  Tensor beta = Tensor::vector({0.1 * factor, -0.2});
  Tensor w2 = testing::random_normal({3, 2}, rng, 0.5);
  for (std::size_t r = 0; r < 3; ++r) w2.at(r, 0) /= factor;
  QuadapterBlock b = make_block("toy", FirstLayer{LayerKind::kLayerNorm, gamma, beta},
                                {LinearLayer{w2, Tensor::vector({0.01, 0.0, -0.03})}}, 8);
  BlockIO io{"toy", testing::random_normal({512, 2}, rng), {}};
  io.outputs = testing::plain_forward(io.inputs, b);
  return {b, io};
}

TEST(TrainPlan, Validation) {
  TrainPlan p;
  EXPECT_NO_THROW(p.validate());
  p.phase1.steps = 0;
  EXPECT_THROW(p.validate(), Error);
  p = TrainPlan{};
  p.phase2.lr_alpha = -1;
  EXPECT_THROW(p.validate(), Error);
}

TEST(CalibrationSet, SizeAndDeterminism) {
  const Corpus a = random_corpus("A", 5000, 1), b = random_corpus("B", 5000, 2);
  const TokenBatch d1 = make_calibration_set({&a, &b}, 5, 128, 9);
  EXPECT_EQ(d1.batch, 10u);
  EXPECT_EQ(d1.seq, 128u);
  EXPECT_EQ(d1.tokens.size(), 1280u);
  EXPECT_EQ(make_calibration_set({&a, &b}, 5, 128, 9).tokens, d1.tokens);
  const Corpus tiny = random_corpus("T", 50, 3);
  EXPECT_THROW(make_calibration_set({&tiny}, 1, 128, 9), Error);
  EXPECT_THROW(make_calibration_set({}, 1, 128, 9), Error);
}

TEST(SampleBatch, TargetsAreNextTokens) {
  std::vector<int> t(300);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<int>(i % 256);
  std::mt19937_64 rng(4);
  const TrainingBatch b = sample_batch(t, 3, 20, rng);
  ASSERT_EQ(b.inputs.tokens.size(), 60u);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(b.targets[i], (b.inputs.tokens[i] + 1) % 256);
}

TEST(BlockCache, RowsAndConsistency) {
  const ModelConfig c = small_config();
  const ToyTransformer m = build_model(c);
  const Corpus a = random_corpus("A", 2000, 5);
  const TokenBatch d1 = make_calibration_set({&a}, 4, 32, 1);
  const std::vector<AdapterSite> sites = adapter_sites(c);
  const BlockIO io = gather_block_io(m, d1, sites[1]);
  EXPECT_EQ(io.inputs.rows(), 128u);
  EXPECT_EQ(io.inputs.cols(), 16u);
  QuantizedView view = QuantizedView::make(c, 8);
  const QuadapterBlock b = extract_block(m, view, sites[1]);
  const std::vector<Tensor> again = testing::plain_forward(io.inputs, b);
  EXPECT_LT(testing::max_rel_error(again[0], io.outputs[0]), 1e-12);
  // Another depth is independent of this one.
  BlockIO other = gather_block_io(m, d1, sites[0]);
  other.inputs[0] += 1.0;
  EXPECT_TRUE(bit_equal(gather_block_io(m, d1, sites[1]).inputs, io.inputs));
}

TEST(BlockCache, EmptyCalibrationSetIsADataError) {
  const ToyTransformer m = build_model(small_config());
  try {
    gather_block_io(m, TokenBatch{}, adapter_sites(m.config)[0]);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
  }
}

TEST(Phase1, OutlierBlockImprovesAndNearsGridOptimum) {
  OutlierCase oc = outlier_case(31);
  const double unit = block_loss(oc.block, oc.io);
  std::mt19937_64 rng(1);
  const BlockCalibration r = calibrate_block(oc.block, oc.io, Phase1Plan{}, rng);
  EXPECT_EQ(r.initial_loss, unit);
  EXPECT_LT(r.final_loss, unit);
  EXPECT_EQ(block_loss(oc.block, oc.io), r.final_loss);
  // Dense grid over both channel scales, the brute-force oracle.
  QuadapterBlock probe = oc.block;
  double best = unit;
  for (int i = 0; i <= 60; ++i) {
    for (int j = 0; j <= 60; ++j) {
      probe.params.alpha = Tensor::vector({std::pow(10.0, -3.0 + 0.075 * i), std::pow(10.0, -1.5 + 0.075 * j)});
      best = std::min(best, block_loss(probe, oc.io));
    }
  }
  EXPECT_LE(r.final_loss, 2.0 * best) << "grid optimum " << best;
}

TEST(Phase1, BalancedBlockStaysNearIdentity) {
  std::mt19937_64 rng(2);
  QuadapterBlock b = make_block("flat", FirstLayer{LayerKind::kLayerNorm, Tensor({8}, 1.0), Tensor({8}, 0.0)},
                                {LinearLayer{testing::random_normal({6, 8}, rng, 0.3), {}}}, 8);
  BlockIO io{"flat", testing::random_normal({256, 8}, rng), {}};
  io.outputs = testing::plain_forward(io.inputs, b);
  // Both quantizers are per-tensor and dynamic, so a uniform rescale of alpha
  // leaves the loss unchanged. Only the shape of alpha is meaningful.
  QuadapterBlock scaled = b;
  for (double& a : scaled.params.alpha.data()) a = 3.0;
  EXPECT_NEAR(block_loss(scaled, io), block_loss(b, io), 1e-9 * block_loss(b, io));
  calibrate_block(b, io, Phase1Plan{}, rng);
  double log_mean = 0;
  for (double a : b.params.alpha.data()) log_mean += std::log(a) / 8.0;
  for (double a : b.params.alpha.data()) EXPECT_NEAR(a / std::exp(log_mean), 1.0, 0.2);
}

TEST(Phase1, OnlyDynamicQuantizersAccepted) {
  OutlierCase oc = outlier_case(4);
  oc.block.activation_q.mode = QuantMode::kStatic;
  std::mt19937_64 rng(1);
  EXPECT_THROW(calibrate_block(oc.block, oc.io, Phase1Plan{}, rng), Error);
}

TEST(Phase1, AlphaStaysPositive) {
  OutlierCase oc = outlier_case(5);
  std::mt19937_64 rng(1);
  Phase1Plan p;
  p.lr = 5.0;
  p.steps = 50;
  calibrate_block(oc.block, oc.io, p, rng);
  for (double a : oc.block.params.alpha.data()) EXPECT_GE(a, QuadapterParams::kMinAlpha);
}

class SmallModel : public ::testing::Test {
 protected:
  void SetUp() override {
    model = build_model(small_config());
    inject_outliers(model, "blk0.ln1", {3}, 100.0);
    corpus = random_corpus("A", 4000, 8);
    d1 = make_calibration_set({&corpus}, 4, 32, 2);
  }
  ToyTransformer model;
  Corpus corpus;
  TokenBatch d1;
};

TEST_F(SmallModel, CalibrateAllKeepsWeightsAndRunsEveryBlock) {
  QuantizedView view = QuantizedView::make(model.config, 8);
  const WeightSnapshot before = snapshot_weights(model);
  LossCurve curve;
  const std::vector<BlockCalibration> r = calibrate_all(model, view, d1, quick_plan(), &curve);
  ASSERT_EQ(r.size(), 5u);
  EXPECT_EQ(r.front().site, "blk0.ln1");
  EXPECT_EQ(r.back().site, "ln_f");
  for (const BlockCalibration& b : r) EXPECT_LE(b.final_loss, b.initial_loss);
  EXPECT_LT(r.front().final_loss, r.front().initial_loss);
  EXPECT_TRUE(changed_weights(model, before).empty());
  EXPECT_EQ(curve.records.size(), 5u * 60u);
  EXPECT_EQ(curve.to_csv().header, (std::vector<std::string>{"step", "block", "loss"}));
}

TEST_F(SmallModel, StaticInitNarrowsSurgeredRangeAndIsDeterministic) {
  QuantizedView plain = QuantizedView::make(model.config, 8);
  install_quadapters(model, plain);
  QuantizedView calibrated = QuantizedView::make(model.config, 8);
  calibrate_all(model, calibrated, d1, quick_plan());
  QuantizedView again = calibrated;
  init_static_quantizers(model, plain, d1);
  init_static_quantizers(model, calibrated, d1);
  init_static_quantizers(model, again, d1);
  const QuantizerState& p = plain.quantizer("blk0.ln1.out");
  const QuantizerState& c = calibrated.quantizer("blk0.ln1.out");
  EXPECT_LT(c.theta_max - c.theta_min, p.theta_max - p.theta_min);
  for (const auto& [name, q] : calibrated.quantizers) {
    EXPECT_LE(q.theta_min, 0.0) << name;
    EXPECT_GE(q.theta_max, 0.0) << name;
    EXPECT_TRUE(q.observed) << name;
    EXPECT_EQ(q.theta_min, again.quantizers.at(name).theta_min) << name;
    EXPECT_EQ(q.theta_max, again.quantizers.at(name).theta_max) << name;
  }
}

TEST_F(SmallModel, StaticInitMatchesChannelStatsTotals) {
  QuantizedView view = QuantizedView::make(model.config, 8);
  init_static_quantizers(model, view, d1);
  // Stats over the same rows, one window per sequence.
  ChannelStats total;
  for (std::size_t s = 0; s < d1.batch; ++s) {
    std::vector<int> seq(d1.tokens.begin() + s * d1.seq, d1.tokens.begin() + (s + 1) * d1.seq);
    seq.push_back(0);  // the window takes seq predictions, so add a dummy target
    const ChannelStats cs = channel_stats(model, nullptr, seq, "blk0.ln2", d1.seq);
    total.total_min = s == 0 ? cs.total_min : std::min(total.total_min, cs.total_min);
    total.total_max = s == 0 ? cs.total_max : std::max(total.total_max, cs.total_max);
  }
  const QuantizerState& q = view.quantizer("blk0.ln2.out");
  EXPECT_EQ(q.theta_min, std::min(total.total_min, 0.0));
  EXPECT_EQ(q.theta_max, std::max(total.total_max, 0.0));
}

TEST_F(SmallModel, FinetuneZeroLrKeepsEverything) {
  QuantizedView view = QuantizedView::make(model.config, 8);
  calibrate_all(model, view, d1, quick_plan());
  init_static_quantizers(model, view, d1);
  TrainPlan p = quick_plan();
  p.phase2.lr_alpha = 0;
  p.phase2.lr_theta = 0;
  QuantizedView before = view;
  make_learned(before);
  const WeightSnapshot w = snapshot_weights(model);
  const FinetuneReport r = finetune_end_to_end(model, view, corpus.tokens, p);
  EXPECT_EQ(r.steps, 5);
  EXPECT_TRUE(changed_weights(model, w).empty());
  for (const auto& [site, a] : view.adapters) EXPECT_TRUE(bit_equal(a.alpha, before.adapters.at(site).alpha)) << site;
  for (const auto& [site, q] : view.quantizers) {
    EXPECT_EQ(q.theta_min, before.quantizers.at(site).theta_min) << site;
    // Weight ranges follow the frozen weights and stay dynamic.
    EXPECT_EQ(q.mode, site.ends_with(".weight") ? QuantMode::kDynamic : QuantMode::kLearned) << site;
  }
}

TEST_F(SmallModel, FinetuneMovesOnlyAlphaAndTheta) {
  QuantizedView view = QuantizedView::make(model.config, 8);
  calibrate_all(model, view, d1, quick_plan());
  init_static_quantizers(model, view, d1);
  const QuantizedView before = view;
  const WeightSnapshot w = snapshot_weights(model);
  LossCurve curve;
  finetune_end_to_end(model, view, corpus.tokens, quick_plan(), &curve);
  EXPECT_TRUE(changed_weights(model, w).empty());
  EXPECT_FALSE(bit_equal(view.adapters.at("blk0.ln1").alpha, before.adapters.at("blk0.ln1").alpha));
  EXPECT_EQ(curve.records.size(), 5u);
  EXPECT_EQ(curve.records.front().block, "e2e");
}

TEST_F(SmallModel, FinetuneNeedsAdapters) {
  QuantizedView view = QuantizedView::make(model.config, 8);
  EXPECT_THROW(finetune_end_to_end(model, view, corpus.tokens, quick_plan()), Error);
}

TEST_F(SmallModel, QatChangesWeightsAndZeroLrDoesNot) {
  QuantizedView view = QuantizedView::make(model.config, 8);
  init_static_quantizers(model, view, d1);
  QuantizedView frozen_view = view;
  ToyTransformer frozen = model;
  TrainPlan p = quick_plan();
  p.phase2.lr_weights = 0;
  p.phase2.lr_theta = 0;
  const WeightSnapshot w0 = snapshot_weights(frozen);
  qat_baseline(frozen, frozen_view, corpus.tokens, p, true);
  EXPECT_TRUE(changed_weights(frozen, w0).empty());

  const WeightSnapshot w = snapshot_weights(model);
  const QuantizerState before = view.quantizer("blk0.fc1.out");
  qat_baseline(model, view, corpus.tokens, quick_plan(), false);
  EXPECT_FALSE(changed_weights(model, w).empty());
  // Without range learning the activation ranges stay put.
  EXPECT_EQ(view.quantizer("blk0.fc1.out").theta_max, before.theta_max);
}

TEST(Pretrain, LearnsARepeatingToken) {
  ModelConfig c = small_config();
  ToyTransformer m = build_model(c);
  const std::vector<int> tokens(400, 7);
  TrainPlan p = quick_plan();
  p.pretrain.steps = 150;
  p.pretrain.lr = 1e-2;
  const FinetuneReport r = pretrain(m, tokens, p);
  EXPECT_LT(r.last_loss, r.first_loss);
  EXPECT_LT(perplexity(m, nullptr, tokens, {32, 4, QuantSwitch::kOff}), 1.05);
}

}  // namespace
}  // namespace quadapter
