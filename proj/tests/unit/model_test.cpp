// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "quadapter/data.hpp"
#include "quadapter/error.hpp"
#include "quadapter/model.hpp"

namespace quadapter {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.max_seq = 16;
  c.seed = 5;
  return c;
}

TokenBatch random_batch(std::size_t batch, std::size_t seq, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, 255);
  TokenBatch b{{}, batch, seq};
  for (std::size_t i = 0; i < batch * seq; ++i) b.tokens.push_back(tok(rng));
  return b;
}

TEST(ModelConfig, RejectsBadShapes) {
  ModelConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.layers = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(BuildModel, DeterministicPerSeed) {
  const ToyTransformer a = build_model(small_config());
  const ToyTransformer b = build_model(small_config());
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(bit_equal(*pa[i].second, *pb[i].second)) << pa[i].first;
  }
  ModelConfig other = small_config();
  other.seed = 6;
  EXPECT_FALSE(bit_equal(build_model(other).tok_emb, a.tok_emb));
}

TEST(BuildModel, DefaultParameterCount) {
  // Embeddings, 2 blocks, final norm and untied head of the default shape.
  const std::size_t d = 64, v = 256, t = 128, f = 256;
  const std::size_t block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (f * d + f) + (d * f + d);
  const std::size_t expect = v * d + t * d + 2 * block + 2 * d + v * d;
  EXPECT_EQ(build_model(ModelConfig{}).parameter_count(), expect);
}

TEST(Forward, CausalInBothModes) {
  std::mt19937_64 rng(1);
  const ToyTransformer m = build_model(small_config());
  const TokenBatch base = random_batch(1, 12, rng);
  for (QuantSwitch mode : {QuantSwitch::kOff, QuantSwitch::kOn}) {
    QuantizedView view = QuantizedView::make(m.config, 8);
    const Tensor ref = forward_logits(m, &view, base, mode);
    for (std::size_t t = 1; t < 12; ++t) {
      TokenBatch changed = base;
      changed.tokens[t] = (changed.tokens[t] + 101) % 256;
      // Fresh dynamic ranges per pass would leak future tokens through the
      // per-tensor statistics, so the quantized check pins the ranges.
      QuantizedView pinned = view;
      for (auto& [name, q] : pinned.quantizers) {
        q.mode = QuantMode::kStatic;
        q.theta_min = std::min(q.theta_min, -50.0);
        q.theta_max = std::max(q.theta_max, 50.0);
        q.observed = true;
      }
      QuantizedView pinned_ref = pinned;
      const Tensor a = forward_logits(m, &pinned_ref, base, mode);
      const Tensor b = forward_logits(m, &pinned, changed, mode);
      for (std::size_t r = 0; r < t; ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) ASSERT_EQ(a.at(r, c), b.at(r, c)) << "t=" << t << " r=" << r;
      }
    }
    EXPECT_EQ(ref.rows(), 12u);
  }
}

TEST(Forward, PositionEmbeddingMatters) {
  const ToyTransformer m = build_model(small_config());
  const TokenBatch same{std::vector<int>(8, 42), 1, 8};
  const Tensor y = forward_logits(m, nullptr, same, QuantSwitch::kOff);
  double diff = 0;
  for (std::size_t c = 0; c < y.cols(); ++c) diff = std::max(diff, std::abs(y.at(0, c) - y.at(7, c)));
  EXPECT_GT(diff, 1e-6);
}

TEST(Forward, RejectsBadTokensAndLength) {
  const ToyTransformer m = build_model(small_config());
  try {
    forward_logits(m, nullptr, TokenBatch{{1, 2, 256}, 1, 3}, QuantSwitch::kOff);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIndex);
  }
  EXPECT_THROW(forward_logits(m, nullptr, TokenBatch{std::vector<int>(17, 1), 1, 17}, QuantSwitch::kOff), Error);
}

TEST(Forward, DynamicQuantizedIsDeterministic) {
  std::mt19937_64 rng(2);
  const ToyTransformer m = build_model(small_config());
  const TokenBatch b = random_batch(2, 10, rng);
  QuantizedView v1 = QuantizedView::make(m.config, 8), v2 = QuantizedView::make(m.config, 8);
  EXPECT_TRUE(bit_equal(forward_logits(m, &v1, b, QuantSwitch::kOn), forward_logits(m, &v2, b, QuantSwitch::kOn)));
}

TEST(Forward, SixteenBitTracksFullPrecision) {
  std::mt19937_64 rng(3);
  const ToyTransformer m = build_model(small_config());
  const TokenBatch b = random_batch(2, 10, rng);
  QuantizedView v = QuantizedView::make(m.config, 16);
  const Tensor fp = forward_logits(m, nullptr, b, QuantSwitch::kOff);
  const Tensor q = forward_logits(m, &v, b, QuantSwitch::kOn);
  for (std::size_t i = 0; i < fp.size(); ++i) ASSERT_NEAR(fp[i], q[i], 1e-2);
}

TEST(Install, TwoPerLayerPlusFinal) {
  for (int layers : {1, 2, 3}) {
    ModelConfig c = small_config();
    c.layers = layers;
    const ToyTransformer m = build_model(c);
    QuantizedView v = QuantizedView::make(c, 8);
    const std::vector<AdapterSite> sites = install_quadapters(m, v);
    EXPECT_EQ(sites.size(), static_cast<std::size_t>(2 * layers + 1));
    EXPECT_EQ(v.adapters.size(), sites.size());
    for (const AdapterSite& s : sites) {
      EXPECT_EQ(s.width, static_cast<std::size_t>(c.d_model));
      EXPECT_EQ(v.adapters.at(s.name).alpha, init_identity(s.width).alpha);
    }
  }
}

TEST(Install, UnitAlphaWithoutQuantizersIsBitExact) {
  std::mt19937_64 rng(4);
  const ToyTransformer m = build_model(small_config());
  const TokenBatch b = random_batch(2, 9, rng);
  QuantizedView v = QuantizedView::make(m.config, 8);
  install_quadapters(m, v);
  EXPECT_TRUE(bit_equal(forward_logits(m, &v, b, QuantSwitch::kOff), forward_logits(m, nullptr, b, QuantSwitch::kOff)));
}

TEST(Install, UnitAlphaQuantizedMatchesPlainQuantized) {
  std::mt19937_64 rng(5);
  const ToyTransformer m = build_model(small_config());
  const TokenBatch b = random_batch(2, 9, rng);
  QuantizedView plain = QuantizedView::make(m.config, 8);
  QuantizedView adapted = plain;
  install_quadapters(m, adapted);
  EXPECT_TRUE(bit_equal(forward_logits(m, &adapted, b, QuantSwitch::kOn), forward_logits(m, &plain, b, QuantSwitch::kOn)));
}

TEST(Exclusions, NoQuantizerOnBiasesStatisticsOrResiduals) {
  const std::vector<QuantAttachment> att = quant_attachments(ModelConfig{});
  EXPECT_FALSE(att.empty());
  for (const QuantAttachment& a : att) {
    for (const char* banned : {"bias", "beta", "mean", "var", "resid", "add", "exp", "max_sub"}) {
      EXPECT_EQ(a.tensor.find(banned), std::string::npos) << a.site << " -> " << a.tensor;
    }
  }
  // Every linear weight is covered.
  for (const auto& [name, t] : build_model(small_config()).parameters()) {
    if (name.ends_with(".weight")) {
      EXPECT_TRUE(std::any_of(att.begin(), att.end(), [&](const QuantAttachment& a) { return a.tensor == name; }))
          << name;
    }
  }
}

TEST(Surgery, PreservesFunction) {
  std::mt19937_64 rng(6);
  ToyTransformer m = build_model(small_config());
  const TokenBatch b = random_batch(2, 12, rng);
  const Tensor before = forward_logits(m, nullptr, b, QuantSwitch::kOff);
  for (const AdapterSite& s : adapter_sites(m.config)) inject_outliers(m, s.name, {5, 11}, 100.0);
  const Tensor after = forward_logits(m, nullptr, b, QuantSwitch::kOff);
  EXPECT_LT(testing::max_rel_error(before, after), 1e-9);
}

TEST(Surgery, ExplodesChannelRanges) {
  std::mt19937_64 rng(7);
  ModelConfig c = ModelConfig{};
  c.max_seq = 32;
  ToyTransformer m = build_model(c);
  std::uniform_int_distribution<int> tok(0, 255);
  std::vector<int> tokens(257);
  for (int& t : tokens) t = tok(rng);
  inject_outliers(m, "blk0.ln1", {5, 37}, 100.0);
  const ChannelStats s = channel_stats(m, nullptr, tokens, "blk0.ln1", 32);
  EXPECT_GE(s.range_ratio(), 50.0);
}

TEST(Surgery, BadSiteOrChannel) {
  ToyTransformer m = build_model(small_config());
  try {
    inject_outliers(m, "blk0.qkv", {1}, 100.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIndex);
  }
  EXPECT_THROW(inject_outliers(m, "blk0.ln1", {16}, 100.0), Error);
  EXPECT_THROW(inject_outliers(m, "blk0.ln1", {1}, 0.0), Error);
}

TEST(FoldCommit, MatchesAdaptedForwardWhenQuantized) {
  std::mt19937_64 rng(8);
  ToyTransformer m = build_model(small_config());
  QuantizedView v = QuantizedView::make(m.config, 8);
  install_quadapters(m, v);
  std::uniform_real_distribution<double> u(0.3, 3.0);
  for (auto& [name, p] : v.adapters) {
    for (double& a : p.alpha.data()) a = u(rng);
  }
  const TokenBatch b = random_batch(2, 9, rng);
  QuantizedView before = v;
  const Tensor adapted = forward_logits(m, &before, b, QuantSwitch::kOn);
  ToyTransformer folded = m;
  fold_commit(folded, v);
  EXPECT_FALSE(v.has_adapters());
  EXPECT_TRUE(bit_equal(forward_logits(folded, &v, b, QuantSwitch::kOn), adapted));
}

}  // namespace
}  // namespace quadapter
