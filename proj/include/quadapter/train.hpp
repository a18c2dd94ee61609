// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "quadapter/csv.hpp"
#include "quadapter/data.hpp"
#include "quadapter/model.hpp"

namespace quadapter {

struct Phase1Plan {
  double lr = 0.1;
  double decay = 0.2;
  int decay_interval = 100;
  int steps = 500;
  std::size_t batch_rows = 64;
};

struct Phase2Plan {
  double lr_alpha = 1e-3;
  double lr_theta = 1e-3;
  double lr_weights = 1e-5;  // QAT only
  int steps = 2000;
  std::size_t batch = 4;
  std::size_t block = 128;
};

struct PretrainPlan {
  double lr = 3e-3;
  int warmup = 50;
  int steps = 1500;
  std::size_t batch = 8;
  std::size_t block = 128;
};

struct TrainPlan {
  Phase1Plan phase1;
  Phase2Plan phase2;
  PretrainPlan pretrain;
  std::uint64_t seed = 1;

  /// Throws a config error on negative rates or non-positive sizes. Phase 2
  /// and pretraining may have zero steps.
  void validate() const;
};

/// One row per recorded step; block is a site name, "e2e", "qat" or
/// "pretrain".
struct LossCurve {
  struct Record {
    int step = 0;
    std::string block;
    double loss = 0.0;
  };
  std::vector<Record> records;

  void add(int step, std::string block, double loss) { records.push_back({step, std::move(block), loss}); }
  csv::Table to_csv() const;
};

/// D1: a fixed batch of calibration sequences drawn from each corpus.
TokenBatch make_calibration_set(const std::vector<const Corpus*>& corpora, std::size_t per_corpus, std::size_t seq,
                                std::uint64_t seed);

/// Random next-token training windows; each row has seq inputs and seq targets.
struct TrainingBatch {
  TokenBatch inputs;
  std::vector<int> targets;
};
TrainingBatch sample_batch(std::span<const int> tokens, std::size_t batch, std::size_t seq, std::mt19937_64& rng);

/// FP inputs and outputs of one adapter block over D1.
struct BlockIO {
  std::string site;
  Tensor inputs;                // normalized activation rows [N x d]
  std::vector<Tensor> outputs;  // per consumer, FP two-layer result
};

using BlockIOCache = std::map<std::string, BlockIO>;

/// Runs the FP model over D1 and captures the block boundary at site.
BlockIO gather_block_io(const ToyTransformer& model, const TokenBatch& d1, const AdapterSite& site);

struct BlockCalibration {
  std::string site;
  double initial_loss = 0.0;  // full-cache MSE at the starting alpha
  double final_loss = 0.0;    // full-cache MSE at the returned alpha
  int best_step = 0;
  double seconds = 0.0;
};

/// Adam on alpha against the FP block outputs with per-minibatch dynamic
/// quantizer ranges. The full-cache loss is checked at every decay interval
/// and the best alpha seen (the initial one included) is kept.
BlockCalibration calibrate_block(QuadapterBlock& block, const BlockIO& io, const Phase1Plan& plan,
                                 std::mt19937_64& rng, LossCurve* curve = nullptr);

/// Full-cache block MSE for the block's current alpha, dynamic quantizers.
double block_loss(QuadapterBlock& block, const BlockIO& io);

/// Installs identity adapters if missing, then calibrates every site bottom
/// to top against FP targets. Model weights are not modified.
std::vector<BlockCalibration> calibrate_all(const ToyTransformer& model, QuantizedView& view, const TokenBatch& d1,
                                            const TrainPlan& plan, LossCurve* curve = nullptr);

/// Activation quantizers become static with ranges observed over D1 (alpha
/// applied). Weight quantizers stay dynamic and follow the current weights.
void init_static_quantizers(const ToyTransformer& model, QuantizedView& view, const TokenBatch& d1);

/// Static activation quantizers become learned, keeping their ranges.
void make_learned(QuantizedView& view);

struct FinetuneReport {
  int steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  double seconds = 0.0;
};

/// Adam on alpha and learned ranges against next-token cross entropy with
/// linear rate decay. Model parameters are never written.
FinetuneReport finetune_end_to_end(const ToyTransformer& model, QuantizedView& view, std::span<const int> d2,
                                   const TrainPlan& plan, LossCurve* curve = nullptr);

/// Quantization-aware training of all weights, and of learned ranges when
/// train_theta is set. Adapters in the view are applied but kept fixed.
FinetuneReport qat_baseline(ToyTransformer& model, QuantizedView& view, std::span<const int> d2,
                            const TrainPlan& plan, bool train_theta, LossCurve* curve = nullptr);

/// FP language-model training with warmup and linear decay.
FinetuneReport pretrain(ToyTransformer& model, std::span<const int> tokens, const TrainPlan& plan,
                        LossCurve* curve = nullptr);

/// Byte copy of every parameter, for the frozen-weight audit.
using WeightSnapshot = std::vector<std::pair<std::string, Tensor>>;
WeightSnapshot snapshot_weights(const ToyTransformer& model);

/// Names of parameters whose bytes differ from the snapshot.
std::vector<std::string> changed_weights(const ToyTransformer& model, const WeightSnapshot& snapshot);

}  // namespace quadapter
