// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "quadapter/csv.hpp"
#include "quadapter/model.hpp"

namespace quadapter {

enum class Split { kTrain, kValid, kTest };

std::string_view to_string(Split split);

/// Byte-level token stream.
struct Corpus {
  std::string name;
  std::vector<int> tokens;
  Split split = Split::kTrain;
};

/// Reads a file as raw bytes, one token per byte.
Corpus load_corpus(const std::filesystem::path& path, const std::string& name, Split split = Split::kTrain);

/// Train/valid/test streams for one source.
struct CorpusSplits {
  Corpus train;
  Corpus valid;
  Corpus test;
};

struct SyntheticCorpora {
  CorpusSplits a;
  CorpusSplits b;
  double unigram_tv = 0.0;  // total-variation distance between the two train sets
};

struct SyntheticOptions {
  std::size_t train_tokens = 60000;
  std::size_t valid_tokens = 8192;
  std::size_t test_tokens = 8192;
  double min_tv = 0.2;
};

/// Two order-2 Markov sources over a small byte alphabet whose transition
/// tables favour disjoint symbol subsets.
SyntheticCorpora make_synthetic_corpora(std::uint64_t seed, const SyntheticOptions& options = {});

double unigram_total_variation(std::span<const int> a, std::span<const int> b, int vocab = 256);

/// Sum of next-token negative log-likelihoods of logits rows against targets.
double token_nll_sum(const Tensor& logits, std::span<const int> targets);

struct PerplexityOptions {
  std::size_t eval_block = 128;
  std::size_t batch = 8;
  QuantSwitch mode = QuantSwitch::kOff;
};

/// exp(mean NLL) over non-overlapping windows of eval_block predictions; each
/// window reads eval_block+1 tokens and shares its last token with the next.
double perplexity(const ToyTransformer& model, QuantizedView* view, std::span<const int> tokens,
                  const PerplexityOptions& options);

/// Windows used by perplexity(), as [start, length) pairs of input positions.
std::vector<std::pair<std::size_t, std::size_t>> eval_windows(std::size_t n_tokens, std::size_t eval_block);

struct ChannelStats {
  std::string site;
  std::vector<double> min;
  std::vector<double> max;
  double total_min = 0.0;
  double total_max = 0.0;

  /// (total max - total min) / median per-channel range.
  double range_ratio() const;
  csv::Table to_csv() const;
  static ChannelStats from_csv(const std::string& site, const csv::Table& table);
};

/// Per-channel min/max of the activation feeding the quantizer at an adapter
/// site (e.g. "blk0.ln1"), with adapters applied and quantizers off.
ChannelStats channel_stats(const ToyTransformer& model, QuantizedView* view, std::span<const int> tokens,
                           const std::string& site, std::size_t eval_block);

}  // namespace quadapter
