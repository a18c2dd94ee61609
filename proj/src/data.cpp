// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <random>

#include "quadapter/error.hpp"

namespace quadapter {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Corpus load_corpus(const std::filesystem::path& path, const std::string& name, Split split) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read corpus " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  require(!bytes.empty(), ErrorKind::kData, "corpus " + path.string() + " is empty");
  Corpus c{name, {}, split};
  c.tokens.reserve(bytes.size());
  for (char ch : bytes) c.tokens.push_back(static_cast<unsigned char>(ch));
  return c;
}

namespace {

constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz ";
constexpr std::size_t kSymbols = kAlphabet.size();
constexpr std::size_t kSuccessors = 4;
constexpr double kPreferredShare = 0.85;

/// Order-2 chain: for each (prev2, prev1) a short list of weighted successors.
struct MarkovChain {
  std::vector<std::array<std::size_t, kSuccessors>> next;
  std::vector<std::array<double, kSuccessors>> cdf;
};

MarkovChain make_chain(std::mt19937_64& rng, std::size_t pref_begin, std::size_t pref_end) {
  MarkovChain c;
  c.next.resize(kSymbols * kSymbols);
  c.cdf.resize(kSymbols * kSymbols);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pref(pref_begin, pref_end - 1);
  std::uniform_int_distribution<std::size_t> any(0, kSymbols - 1);
  std::exponential_distribution<double> weight(1.0);
  for (std::size_t ctx = 0; ctx < kSymbols * kSymbols; ++ctx) {
    double total = 0.0;
    std::array<double, kSuccessors> w{};
    for (std::size_t k = 0; k < kSuccessors; ++k) {
      c.next[ctx][k] = u(rng) < kPreferredShare ? pref(rng) : any(rng);
      w[k] = weight(rng) + 0.05;
      total += w[k];
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < kSuccessors; ++k) {
      acc += w[k] / total;
      c.cdf[ctx][k] = acc;
    }
    c.cdf[ctx][kSuccessors - 1] = 1.0;
  }
  return c;
}

std::vector<int> sample_chain(const MarkovChain& c, std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any(0, kSymbols - 1);
  std::size_t p2 = any(rng), p1 = any(rng);
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ctx = p2 * kSymbols + p1;
    const double r = u(rng);
    std::size_t k = 0;
    while (k + 1 < kSuccessors && r >= c.cdf[ctx][k]) ++k;
    const std::size_t s = c.next[ctx][k];
    out.push_back(static_cast<unsigned char>(kAlphabet[s]));
    p2 = p1;
    p1 = s;
  }
  return out;
}

CorpusSplits sample_splits(const MarkovChain& c, std::mt19937_64& rng, const std::string& name,
                           const SyntheticOptions& o) {
  return {Corpus{name, sample_chain(c, rng, o.train_tokens), Split::kTrain},
          Corpus{name, sample_chain(c, rng, o.valid_tokens), Split::kValid},
          Corpus{name, sample_chain(c, rng, o.test_tokens), Split::kTest}};
}

}  // namespace

double unigram_total_variation(std::span<const int> a, std::span<const int> b, int vocab) {
  require(!a.empty() && !b.empty(), ErrorKind::kData, "total variation of an empty stream");
  std::vector<double> pa(vocab, 0.0), pb(vocab, 0.0);
  for (int t : a) pa.at(t) += 1.0;
  for (int t : b) pb.at(t) += 1.0;
  double tv = 0.0;
  for (int i = 0; i < vocab; ++i) {
    tv += std::abs(pa[i] / static_cast<double>(a.size()) - pb[i] / static_cast<double>(b.size()));
  }
  return 0.5 * tv;
}

SyntheticCorpora make_synthetic_corpora(std::uint64_t seed, const SyntheticOptions& options) {
  require(options.train_tokens > 1 && options.valid_tokens > 1 && options.test_tokens > 1, ErrorKind::kData,
          "synthetic splits need at least two tokens");
  constexpr int kMaxAttempts = 64;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(attempt) * 0x9E3779B97F4A7C15ull);
    const std::size_t half = (kSymbols - 1) / 2;
    const MarkovChain chain_a = make_chain(rng, 0, half);
    const MarkovChain chain_b = make_chain(rng, half, kSymbols - 1);
    SyntheticCorpora out;
    out.a = sample_splits(chain_a, rng, "A", options);
    out.b = sample_splits(chain_b, rng, "B", options);
    out.unigram_tv = unigram_total_variation(out.a.train.tokens, out.b.train.tokens);
    if (out.unigram_tv > options.min_tv) return out;
  }
  fail(ErrorKind::kData, "could not generate corpora with unigram TV above threshold");
}

double token_nll_sum(const Tensor& logits, std::span<const int> targets) {
  require(logits.rank() == 2 && logits.shape()[0] == targets.size(), ErrorKind::kDimension,
          "one target per logit row required");
  const std::size_t vocab = logits.shape()[1];
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const double* row = logits.ptr() + r * vocab;
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < vocab, ErrorKind::kIndex,
            "target outside vocabulary");
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
    total += std::log(z) + mx - row[targets[r]];
  }
  return total;
}

std::vector<std::pair<std::size_t, std::size_t>> eval_windows(std::size_t n_tokens, std::size_t eval_block) {
  require(eval_block > 0, ErrorKind::kContract, "eval block must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> w;
  for (std::size_t s = 0; s + 1 < n_tokens;) {
    const std::size_t len = std::min(eval_block, n_tokens - 1 - s);
    w.emplace_back(s, len);
    s += len;
  }
  return w;
}

double perplexity(const ToyTransformer& model, QuantizedView* view, std::span<const int> tokens,
                  const PerplexityOptions& options) {
  require(tokens.size() >= 2, ErrorKind::kData, "perplexity needs at least two tokens");
  require(options.batch > 0, ErrorKind::kContract, "perplexity batch must be positive");
  require(options.eval_block <= static_cast<std::size_t>(model.config.max_seq), ErrorKind::kConfig,
          "eval block exceeds the model context");
  const auto windows = eval_windows(tokens.size(), options.eval_block);
  // Group windows of equal length so each forward is a rectangular batch.
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (const auto& [start, len] : windows) by_len[len].push_back(start);
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& [len, starts] : by_len) {
    for (std::size_t i = 0; i < starts.size(); i += options.batch) {
      const std::size_t nb = std::min(options.batch, starts.size() - i);
      TokenBatch batch{{}, nb, len};
      std::vector<int> targets;
      for (std::size_t k = 0; k < nb; ++k) {
        const std::size_t s = starts[i + k];
        batch.tokens.insert(batch.tokens.end(), tokens.begin() + s, tokens.begin() + s + len);
        targets.insert(targets.end(), tokens.begin() + s + 1, tokens.begin() + s + 1 + len);
      }
      const Tensor logits = forward_logits(model, view, batch, options.mode);
      nll += token_nll_sum(logits, targets);
      count += targets.size();
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

double ChannelStats::range_ratio() const {
  require(!min.empty() && min.size() == max.size(), ErrorKind::kData, "empty channel statistics");
  std::vector<double> ranges(min.size());
  for (std::size_t i = 0; i < min.size(); ++i) ranges[i] = max[i] - min[i];
  std::sort(ranges.begin(), ranges.end());
  const std::size_t n = ranges.size();
  const double median = n % 2 ? ranges[n / 2] : 0.5 * (ranges[n / 2 - 1] + ranges[n / 2]);
  require(median > 0.0, ErrorKind::kData, "median channel range is zero at " + site);
  return (total_max - total_min) / median;
}

csv::Table ChannelStats::to_csv() const {
  csv::Table t{{"channel", "min", "max"}, {}};
  for (std::size_t i = 0; i < min.size(); ++i) {
    t.rows.push_back({std::to_string(i), csv::format_number(min[i]), csv::format_number(max[i])});
  }
  return t;
}

ChannelStats ChannelStats::from_csv(const std::string& site, const csv::Table& table) {
  ChannelStats s;
  s.site = site;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    require(static_cast<std::size_t>(table.number(r, "channel")) == r, ErrorKind::kData, "channels out of order");
    s.min.push_back(table.number(r, "min"));
    s.max.push_back(table.number(r, "max"));
  }
  require(!s.min.empty(), ErrorKind::kData, "channel statistics CSV has no rows");
  s.total_min = *std::min_element(s.min.begin(), s.min.end());
  s.total_max = *std::max_element(s.max.begin(), s.max.end());
  return s;
}

ChannelStats channel_stats(const ToyTransformer& model, QuantizedView* view, std::span<const int> tokens,
                           const std::string& site, std::size_t eval_block) {
  std::string probe_name = site;
  const auto attachments = quant_attachments(model.config);
  const auto is_activation = [&](const std::string& n) {
    return std::any_of(attachments.begin(), attachments.end(),
                       [&](const QuantAttachment& a) { return a.site == n && a.target == QuantTarget::kActivation; });
  };
  if (!is_activation(probe_name)) probe_name = site + ".out";
  require(is_activation(probe_name), ErrorKind::kIndex, "no activation site '" + site + "'");
  require(tokens.size() >= 2, ErrorKind::kData, "channel statistics need at least two tokens");

  ChannelStats stats;
  stats.site = site;
  ActivationProbe probe = [&](const std::string& name, const Tensor& v) {
    if (name != probe_name) return;
    const std::size_t d = v.cols();
    if (stats.min.empty()) {
      stats.min.assign(d, std::numeric_limits<double>::infinity());
      stats.max.assign(d, -std::numeric_limits<double>::infinity());
    }
    for (std::size_t r = 0; r < v.rows(); ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        stats.min[c] = std::min(stats.min[c], v.at(r, c));
        stats.max[c] = std::max(stats.max[c], v.at(r, c));
      }
    }
  };
  for (const auto& [start, len] : eval_windows(tokens.size(), eval_block)) {
    TokenBatch batch{{tokens.begin() + start, tokens.begin() + start + len}, 1, len};
    Graph g;
    ForwardOptions opt;
    opt.run.mode = QuantSwitch::kOff;
    opt.run.probe = &probe;
    forward(g, model, view, batch, opt);
  }
  require(!stats.min.empty(), ErrorKind::kData, "site '" + site + "' was never reached");
  stats.total_min = *std::min_element(stats.min.begin(), stats.min.end());
  stats.total_max = *std::max_element(stats.max.begin(), stats.max.end());
  return stats;
}

}  // namespace quadapter
