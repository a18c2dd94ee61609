// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "quadapter/csv.hpp"
#include "quadapter/data.hpp"
#include "quadapter/error.hpp"
#include "quadapter/model.hpp"

namespace fs = std::filesystem;

namespace quadapter {
namespace {

fs::path temp_file(const std::string& name, const std::string& content) {
  const fs::path p = fs::temp_directory_path() / ("quadapter_data_test_" + name);
  std::ofstream(p, std::ios::binary) << content;
  return p;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.max_seq = 16;
  c.seed = 9;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, 255);
  std::vector<int> t(n);
  for (int& v : t) v = tok(rng);
  return t;
}

TEST(LoadCorpus, ByteIdentity) {
  const Corpus c = load_corpus(temp_file("ab", "ab"), "ab");
  EXPECT_EQ(c.tokens, (std::vector<int>{97, 98}));
  EXPECT_EQ(c.name, "ab");
  const Corpus hi = load_corpus(temp_file("hi", std::string("\xff\x00", 2)), "hi");
  EXPECT_EQ(hi.tokens, (std::vector<int>{255, 0}));
}

TEST(LoadCorpus, Errors) {
  try {
    load_corpus(temp_file("empty", ""), "e");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
  }
  try {
    load_corpus("/nonexistent/quadapter/file.txt", "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}

TEST(LoadCorpus, Deterministic) {
  const fs::path p = temp_file("same", "hello world");
  EXPECT_EQ(load_corpus(p, "a").tokens, load_corpus(p, "a").tokens);
}

TEST(Synthetic, DistinctDistributionsAndSeedDeterminism) {
  SyntheticOptions o;
  o.train_tokens = 20000;
  o.valid_tokens = 2000;
  o.test_tokens = 2000;
  const SyntheticCorpora a = make_synthetic_corpora(3, o);
  const SyntheticCorpora b = make_synthetic_corpora(3, o);
  EXPECT_EQ(a.a.train.tokens, b.a.train.tokens);
  EXPECT_EQ(a.b.test.tokens, b.b.test.tokens);
  EXPECT_GT(a.unigram_tv, 0.2);
  EXPECT_DOUBLE_EQ(a.unigram_tv, unigram_total_variation(a.a.train.tokens, a.b.train.tokens));
  EXPECT_EQ(a.a.train.tokens.size(), 20000u);
  EXPECT_EQ(a.a.valid.tokens.size(), 2000u);
  EXPECT_NE(make_synthetic_corpora(4, o).a.train.tokens, a.a.train.tokens);
}

TEST(TotalVariation, HandCases) {
  const std::vector<int> x{1, 1, 2, 2}, y{1, 1, 1, 1}, z{3, 3};
  EXPECT_DOUBLE_EQ(unigram_total_variation(x, x), 0.0);
  EXPECT_DOUBLE_EQ(unigram_total_variation(x, y), 0.5);
  EXPECT_DOUBLE_EQ(unigram_total_variation(x, z), 1.0);
}

TEST(EvalWindows, CoverEveryPredictionOnce) {
  // 10 tokens give 9 predictions; blocks of 4 -> 4, 4, 1.
  const auto w = eval_windows(10, 4);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[0], (std::pair<std::size_t, std::size_t>{0, 4}));
  EXPECT_EQ(w[1], (std::pair<std::size_t, std::size_t>{4, 4}));
  EXPECT_EQ(w[2], (std::pair<std::size_t, std::size_t>{8, 1}));
  EXPECT_TRUE(eval_windows(1, 4).empty());
}

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  ToyTransformer m = build_model(small_config());
  m.head.weight = Tensor(m.head.weight.shape(), 0.0);
  const std::vector<int> t = random_tokens(50, 1);
  EXPECT_NEAR(perplexity(m, nullptr, t, {16, 4, QuantSwitch::kOff}), 256.0, 1e-9);
}

TEST(Perplexity, TooShortIsADataError) {
  const ToyTransformer m = build_model(small_config());
  const std::vector<int> one{4};
  try {
    perplexity(m, nullptr, one, {16, 4, QuantSwitch::kOff});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
  }
}

TEST(Perplexity, MatchesWindowByWindowSumInAnyOrder) {
  const ToyTransformer m = build_model(small_config());
  const std::vector<int> t = random_tokens(101, 2);
  const double ppl = perplexity(m, nullptr, t, {16, 3, QuantSwitch::kOff});
  // Independent oracle: one window at a time, visited in reverse.
  auto w = eval_windows(t.size(), 16);
  std::reverse(w.begin(), w.end());
  double nll = 0;
  std::size_t n = 0;
  for (const auto& [s, len] : w) {
    const TokenBatch b{{t.begin() + s, t.begin() + s + len}, 1, len};
    const Tensor logits = forward_logits(m, nullptr, b, QuantSwitch::kOff);
    for (std::size_t r = 0; r < len; ++r) {
      double mx = -1e300, z = 0;
      for (std::size_t c = 0; c < logits.cols(); ++c) mx = std::max(mx, logits.at(r, c));
      for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(logits.at(r, c) - mx);
      nll += std::log(z) + mx - logits.at(r, t[s + r + 1]);
      ++n;
    }
  }
  EXPECT_EQ(n, 100u);
  EXPECT_NEAR(ppl, std::exp(nll / n), 1e-10 * ppl);
  // Batch size must not matter.
  EXPECT_NEAR(perplexity(m, nullptr, t, {16, 1, QuantSwitch::kOff}), ppl, 1e-10 * ppl);
}

TEST(Perplexity, EvalBlockBeyondContextIsRejected) {
  const ToyTransformer m = build_model(small_config());
  const std::vector<int> t = random_tokens(40, 3);
  EXPECT_THROW(perplexity(m, nullptr, t, {32, 4, QuantSwitch::kOff}), Error);
}

TEST(ChannelStats, ConstantActivation) {
  ToyTransformer m = build_model(small_config());
  // gamma = 0 makes the layer-norm output equal beta for every token.
  m.parameter("blk0.ln1.gamma") = Tensor({16}, 0.0);
  Tensor beta({16});
  for (std::size_t i = 0; i < 16; ++i) beta[i] = 0.1 * static_cast<double>(i) - 0.5;
  m.parameter("blk0.ln1.beta") = beta;
  const ChannelStats s = channel_stats(m, nullptr, random_tokens(40, 4), "blk0.ln1", 16);
  ASSERT_EQ(s.min.size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(s.min[i], s.max[i]);
    EXPECT_EQ(s.min[i], beta[i]);
  }
  EXPECT_EQ(s.total_min, -0.5);
  EXPECT_THROW(s.range_ratio(), Error);
}

TEST(ChannelStats, TotalsAndRatio) {
  const ChannelStats s{"x", {-1, 0, -3}, {1, 2, 1}, -3, 2};
  // ranges 2, 2, 4 -> median 2; total range 5
  EXPECT_DOUBLE_EQ(s.range_ratio(), 2.5);
}

TEST(ChannelStats, RepeatableAndBadSite) {
  const ToyTransformer m = build_model(small_config());
  const std::vector<int> t = random_tokens(40, 5);
  const ChannelStats a = channel_stats(m, nullptr, t, "blk0.ln2", 16);
  const ChannelStats b = channel_stats(m, nullptr, t, "blk0.ln2", 16);
  EXPECT_EQ(a.min, b.min);
  EXPECT_EQ(a.max, b.max);
  try {
    channel_stats(m, nullptr, t, "blk9.ln1", 16);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIndex);
  }
}

TEST(ChannelStats, CsvRoundTrip) {
  const ToyTransformer m = build_model(small_config());
  const ChannelStats a = channel_stats(m, nullptr, random_tokens(40, 6), "ln_f", 16);
  const csv::Table t = a.to_csv();
  EXPECT_EQ(t.header, (std::vector<std::string>{"channel", "min", "max"}));
  const ChannelStats b = ChannelStats::from_csv("ln_f", csv::parse(csv::to_string(t)));
  EXPECT_EQ(a.min, b.min);
  EXPECT_EQ(a.max, b.max);
  EXPECT_EQ(a.total_min, b.total_min);
  EXPECT_EQ(a.total_max, b.total_max);
}

TEST(Csv, SeventeenDigitsRoundTrip) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) * std::pow(10.0, static_cast<int>(i % 40) - 20);
    EXPECT_EQ(std::stod(csv::format_number(v)), v);
  }
}

TEST(Csv, PlainFieldsRoundTripAndSeparatorsAreRefused) {
  const csv::Table t{{"a", "b"}, {{"x", "y"}, {"1", "2"}}};
  const csv::Table back = csv::parse(csv::to_string(t));
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_EQ(back.number(1, "b"), 2.0);
  EXPECT_THROW(back.column("zzz"), Error);
  EXPECT_THROW(csv::to_string(csv::Table{{"a"}, {{"x,y"}}}), Error);
}

}  // namespace
}  // namespace quadapter
