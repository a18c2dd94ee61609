// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "quadapter/config.hpp"
#include "quadapter/csv.hpp"
#include "quadapter/data.hpp"
#include "quadapter/manifest.hpp"
#include "quadapter/model.hpp"
#include "quadapter/train.hpp"

namespace quadapter {

/// Named corpora of one run, in declaration order.
struct CorpusSet {
  std::vector<CorpusSplits> corpora;
  double unigram_tv = 0.0;  // synthetic corpora only

  const CorpusSplits& find(const std::string& name) const;
  std::vector<std::string> names() const;
  /// Concatenated train splits.
  std::vector<int> joint_train() const;
};

CorpusSet load_corpora(const RunConfig& config);

/// D1, shared by every method.
TokenBatch calibration_set(const RunConfig& config, const CorpusSet& corpora);

/// Leading fraction of a train split, never shorter than one window.
std::vector<int> finetune_stream(const Corpus& train, double fraction, std::size_t block);

/// Applies the configured outlier surgery and returns the surgered sites.
std::vector<std::string> apply_surgery(ToyTransformer& model, const SurgeryConfig& surgery);

struct PplRow {
  std::string method;
  std::string fid;  // "none" for rows without fine-tuning
  std::string eval;
  double fraction = 1.0;
  double ppl = 0.0;
};

inline const std::vector<std::string> kPplColumns{"method", "fid_corpus", "eval_corpus", "data_fraction", "ppl"};

csv::Table ppl_table(const std::vector<PplRow>& rows);
std::vector<PplRow> ppl_rows(const csv::Table& table);

/// Test-split perplexity on every corpus. view == nullptr evaluates FP.
std::vector<PplRow> evaluate(const std::string& method, const std::string& fid, double fraction,
                             const ToyTransformer& model, QuantizedView* view, const CorpusSet& corpora,
                             const EvalConfig& eval);

struct MethodOutcome {
  Method method = Method::kPtq;
  std::string fid = "none";
  double fraction = 1.0;
  ToyTransformer model;
  QuantizedView view;
  std::vector<BlockCalibration> phase1;
  FinetuneReport phase2;
  std::vector<std::string> changed_weights;
  LossCurve curve;
  std::vector<PplRow> rows;

  /// Weight-preserving methods must leave every parameter byte-identical.
  bool audit_passed() const { return !keeps_weights(method) || changed_weights.empty(); }
  std::string label() const;
};

/// Runs one method on a copy of fp (already surgered when surgery applies).
/// fid is ignored by methods without fine-tuning.
MethodOutcome run_method(Method method, const ToyTransformer& fp, const CorpusSet& corpora, const TokenBatch& d1,
                         const RunConfig& config, const std::string& fid, double fraction = 1.0);

struct Gate {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ExperimentReport {
  std::vector<PplRow> rows;
  std::vector<std::string> failures;
  std::vector<Gate> gates;
  std::vector<BlockCalibration> phase1;
  std::string stats_site;
  double ratio_before = 0.0;
  double ratio_after = 0.0;
  std::vector<std::string> artifacts;  // relative to the output directory
  std::string verdict;

  const Gate* gate(const std::string& name) const;
};

/// The full matrix on a clean FP model: surgery, FP and PTQ-family rows, then
/// every fine-tuned method on every corpus and data fraction. Sub-run
/// failures are recorded and the matrix continues. Writes CSVs, curves,
/// checkpoints and the verdict under out.
ExperimentReport run_experiment(const RunConfig& config, const ToyTransformer& clean_fp, const CorpusSet& corpora,
                                const std::filesystem::path& out);

// Commands. Each writes its outputs and a manifest under out.

struct PretrainResult {
  ToyTransformer model;
  std::vector<PplRow> rows;
  FinetuneReport report;
  std::filesystem::path checkpoint;
};
PretrainResult cmd_pretrain(const RunConfig& config, const std::filesystem::path& out);

struct QuantizeResult {
  MethodOutcome outcome;
  std::filesystem::path checkpoint;
};
QuantizeResult cmd_quantize(const RunConfig& config, const std::filesystem::path& fp_checkpoint,
                            const std::filesystem::path& out);

/// Pretrains first when fp_checkpoint is empty.
ExperimentReport cmd_experiment(const RunConfig& config, const std::filesystem::path& fp_checkpoint,
                                const std::filesystem::path& out);

struct InspectResult {
  ChannelStats stats;
  double ratio = 0.0;
};
/// corpus is a corpus name from the config or a file path.
InspectResult cmd_inspect(const RunConfig& config, const std::filesystem::path& checkpoint, const std::string& corpus,
                          const std::string& site, const std::filesystem::path& out_csv);

struct FoldResult {
  double max_abs_deviation = 0.0;
  std::size_t probe_tokens = 0;
};
/// Folds adapters into the weights and checks the quantized forward on a probe
/// batch; any deviation is a self-check error and nothing is written.
FoldResult cmd_fold(const std::filesystem::path& checkpoint, const std::filesystem::path& out_checkpoint);

}  // namespace quadapter
