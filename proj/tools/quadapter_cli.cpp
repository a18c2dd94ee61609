// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver: pretrain, quantize, experiment, inspect, fold.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "quadapter/checkpoint.hpp"
#include "quadapter/config.hpp"
#include "quadapter/error.hpp"
#include "quadapter/pipeline.hpp"

namespace fs = std::filesystem;
using namespace quadapter;

namespace {

enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kConfigError = 2,
  kDataError = 3,
  kTrainingError = 4,
  kSelfCheckError = 5,
  kUsageError = 6,
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return kConfigError;
    case ErrorKind::kData:
    case ErrorKind::kIo: return kDataError;
    case ErrorKind::kTraining:
    case ErrorKind::kNonFinite: return kTrainingError;
    case ErrorKind::kSelfCheck: return kSelfCheckError;
    default: return kUsageError;
  }
}

/// A plain config file, or a manifest whose config snapshot is reused.
RunConfig read_config(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::kConfig, "cannot read config " + path);
  json j;
  try {
    j = json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, "config " + path + " is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("command") && j.contains("config")) return RunConfig::from_json(j.at("config"));
  return RunConfig::from_json(j);
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;

  RunConfig load() const {
    RunConfig c = config.empty() ? RunConfig{} : read_config(config);
    if (seed) c.set_seed(*seed);
    if (!output.empty()) c.output_dir = output;
    return c;
  }
};

void add_common(CLI::App* cmd, Common& o, bool need_config) {
  auto* opt = cmd->add_option("-c,--config", o.config, "JSON run config or a manifest");
  if (need_config) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("-s,--seed", o.seed, "Override the run seed");
  cmd->add_option("-o,--output", o.output, "Output directory (relative to $QUADAPTER_OUTPUT_ROOT when set)");
}

void print_rows(const std::vector<PplRow>& rows) {
  for (const PplRow& r : rows) {
    std::printf("%-18s fid=%-5s eval=%-5s frac=%-5g ppl=%.4f\n", r.method.c_str(), r.fid.c_str(), r.eval.c_str(),
                r.fraction, r.ppl);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quadapter: adapters that make a transformer's activations easier to quantize"};
  app.require_subcommand(1);

  Common pre_opt;
  auto* pre = app.add_subcommand("pretrain", "Train the FP toy model on all corpora");
  add_common(pre, pre_opt, true);

  Common q_opt;
  std::string q_ckpt, q_method, q_fid;
  auto* quant = app.add_subcommand("quantize", "Run one quantization method on an FP checkpoint");
  add_common(quant, q_opt, true);
  quant->add_option("-k,--checkpoint", q_ckpt, "FP checkpoint")->required()->check(CLI::ExistingFile);
  quant->add_option("-m,--method", q_method, "ptq | cle | quadapter_bc | quadapter | qat | quadapter_bc_qat | qat_no_lsq");
  quant->add_option("--fid", q_fid, "Fine-tuning corpus name");

  Common e_opt;
  std::string e_ckpt;
  auto* exp = app.add_subcommand("experiment", "Run the full method x corpus matrix");
  add_common(exp, e_opt, true);
  exp->add_option("-k,--checkpoint", e_ckpt, "FP checkpoint; pretrains first when omitted")
      ->check(CLI::ExistingFile);

  Common i_opt;
  std::string i_ckpt, i_corpus, i_site, i_out;
  auto* insp = app.add_subcommand("inspect", "Per-channel activation ranges at an adapter site");
  add_common(insp, i_opt, false);
  insp->add_option("-k,--checkpoint", i_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  insp->add_option("--corpus", i_corpus, "Corpus name from the config, or a file")->required();
  insp->add_option("--site", i_site, "Site, e.g. blk0.ln1")->required();
  insp->add_option("--csv", i_out, "Output CSV path")->required();

  std::string f_ckpt, f_out;
  auto* fold = app.add_subcommand("fold", "Fold adapters into the weights, with a bit-exact self-check");
  fold->add_option("-k,--checkpoint", f_ckpt, "Checkpoint with adapters")->required()->check(CLI::ExistingFile);
  fold->add_option("--out", f_out, "Folded checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*pre) {
      const RunConfig c = pre_opt.load();
      const fs::path out = resolve_output_dir(c.output_dir);
      const PretrainResult r = cmd_pretrain(c, out);
      std::printf("pretrained %d steps, loss %.4f -> %.4f, checkpoint %s\n", r.report.steps, r.report.first_loss,
                  r.report.last_loss, r.checkpoint.string().c_str());
      print_rows(r.rows);
    } else if (*quant) {
      RunConfig c = q_opt.load();
      if (!q_method.empty()) c.method = parse_method(q_method);
      if (!q_fid.empty()) c.fid = q_fid;
      c.validate();
      const QuantizeResult r = cmd_quantize(c, q_ckpt, resolve_output_dir(c.output_dir));
      std::printf("%s: phase 1 blocks %zu, fine-tuning steps %d, checkpoint %s\n", r.outcome.label().c_str(),
                  r.outcome.phase1.size(), r.outcome.phase2.steps, r.checkpoint.string().c_str());
      for (const BlockCalibration& b : r.outcome.phase1) {
        std::printf("  %-10s block MSE %.6g -> %.6g\n", b.site.c_str(), b.initial_loss, b.final_loss);
      }
      print_rows(r.outcome.rows);
    } else if (*exp) {
      const RunConfig c = e_opt.load();
      const ExperimentReport r = cmd_experiment(c, e_ckpt, resolve_output_dir(c.output_dir));
      std::fputs(r.verdict.c_str(), stdout);
      if (!r.failures.empty()) return kTrainingError;
    } else if (*insp) {
      const RunConfig c = i_opt.load();
      const InspectResult r = cmd_inspect(c, i_ckpt, i_corpus, i_site, i_out);
      std::printf("%s: %zu channels, total range [%.6g, %.6g], R = %.4f\n", r.stats.site.c_str(), r.stats.min.size(),
                  r.stats.total_min, r.stats.total_max, r.ratio);
    } else if (*fold) {
      const FoldResult r = cmd_fold(f_ckpt, f_out);
      std::printf("fold self-check on %zu probe tokens: max abs deviation = %g\n", r.probe_tokens,
                  r.max_abs_deviation);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", std::string(to_string(e.kind())).c_str(), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUnexpected;
  }
  return kOk;
}
