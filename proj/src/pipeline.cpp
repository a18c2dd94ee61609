// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <sstream>

#include "quadapter/checkpoint.hpp"
#include "quadapter/error.hpp"

namespace quadapter {

namespace fs = std::filesystem;

namespace {

void note(const std::string& msg) { std::fprintf(stderr, "[quadapter] %s\n", msg.c_str()); }

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fraction_tag(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", f);
  return buf;
}

}  // namespace

const CorpusSplits& CorpusSet::find(const std::string& name) const {
  for (const CorpusSplits& c : corpora) {
    if (c.train.name == name) return c;
  }
  fail(ErrorKind::kConfig, "unknown corpus '" + name + "'");
}

std::vector<std::string> CorpusSet::names() const {
  std::vector<std::string> n;
  for (const CorpusSplits& c : corpora) n.push_back(c.train.name);
  return n;
}

std::vector<int> CorpusSet::joint_train() const {
  std::vector<int> all;
  for (const CorpusSplits& c : corpora) all.insert(all.end(), c.train.tokens.begin(), c.train.tokens.end());
  return all;
}

CorpusSet load_corpora(const RunConfig& config) {
  CorpusSet set;
  if (config.data.synthetic_seed) {
    SyntheticCorpora s = make_synthetic_corpora(*config.data.synthetic_seed, config.data.synthetic);
    set.unigram_tv = s.unigram_tv;
    set.corpora = {std::move(s.a), std::move(s.b)};
    return set;
  }
  for (const CorpusPaths& p : config.data.corpora) {
    set.corpora.push_back({load_corpus(p.train, p.name, Split::kTrain), load_corpus(p.valid, p.name, Split::kValid),
                           load_corpus(p.test, p.name, Split::kTest)});
  }
  for (const CorpusSplits& c : set.corpora) {
    for (const Corpus* s : {&c.train, &c.valid, &c.test}) {
      for (int t : s->tokens) {
        require(t >= 0 && t < config.model.vocab, ErrorKind::kData, "corpus " + s->name + " has a token outside V");
      }
    }
  }
  return set;
}

TokenBatch calibration_set(const RunConfig& config, const CorpusSet& corpora) {
  std::vector<const Corpus*> trains;
  for (const CorpusSplits& c : corpora.corpora) trains.push_back(&c.train);
  return make_calibration_set(trains, config.data.calib_per_corpus, config.data.calib_seq, config.seed ^ 0xD1D1ull);
}

std::vector<int> finetune_stream(const Corpus& train, double fraction, std::size_t block) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorKind::kConfig, "data fraction must lie in (0, 1]");
  const auto wanted = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.tokens.size())));
  const std::size_t n = std::min(train.tokens.size(), std::max(wanted, block + 2));
  return {train.tokens.begin(), train.tokens.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<std::string> apply_surgery(ToyTransformer& model, const SurgeryConfig& surgery) {
  std::vector<std::string> sites;
  if (!surgery.enabled) return sites;
  if (surgery.sites.empty()) {
    for (const AdapterSite& s : adapter_sites(model.config)) sites.push_back(s.name);
  } else {
    sites = surgery.sites;
  }
  for (const std::string& s : sites) inject_outliers(model, s, surgery.channels, surgery.factor);
  return sites;
}

csv::Table ppl_table(const std::vector<PplRow>& rows) {
  csv::Table t{kPplColumns, {}};
  for (const PplRow& r : rows) {
    t.rows.push_back({r.method, r.fid, r.eval, csv::format_number(r.fraction), csv::format_number(r.ppl)});
  }
  return t;
}

std::vector<PplRow> ppl_rows(const csv::Table& table) {
  require(table.header == kPplColumns, ErrorKind::kData, "perplexity table has unexpected columns");
  std::vector<PplRow> rows;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    rows.push_back({table.rows[i][0], table.rows[i][1], table.rows[i][2], table.number(i, "data_fraction"),
                    table.number(i, "ppl")});
  }
  return rows;
}

std::vector<PplRow> evaluate(const std::string& method, const std::string& fid, double fraction,
                             const ToyTransformer& model, QuantizedView* view, const CorpusSet& corpora,
                             const EvalConfig& eval) {
  PerplexityOptions opt{eval.eval_block, eval.batch, view ? QuantSwitch::kOn : QuantSwitch::kOff};
  std::vector<PplRow> rows;
  for (const CorpusSplits& c : corpora.corpora) {
    rows.push_back({method, fid, c.test.name, fraction, perplexity(model, view, c.test.tokens, opt)});
  }
  return rows;
}

std::string MethodOutcome::label() const {
  std::string l(to_string(method));
  if (fid != "none") l += "_" + fid;
  if (fraction != 1.0) l += "_f" + fraction_tag(fraction);
  return l;
}

MethodOutcome run_method(Method method, const ToyTransformer& fp, const CorpusSet& corpora, const TokenBatch& d1,
                         const RunConfig& config, const std::string& fid, double fraction) {
  MethodOutcome o;
  o.method = method;
  o.fid = uses_finetuning(method) ? fid : "none";
  o.fraction = uses_finetuning(method) ? fraction : 1.0;
  o.model = fp;
  o.view = QuantizedView::make(fp.config, config.bits);
  const WeightSnapshot before = snapshot_weights(o.model);
  std::vector<int> d2;
  if (uses_finetuning(method)) d2 = finetune_stream(corpora.find(fid).train, fraction, config.train.phase2.block);

  switch (method) {
    case Method::kPtq:
    case Method::kQat:
    case Method::kQatNoLsq:
      init_static_quantizers(o.model, o.view, d1);
      if (method != Method::kPtq) {
        o.phase2 = qat_baseline(o.model, o.view, d2, config.train, method == Method::kQat, &o.curve);
      }
      break;
    case Method::kCle:
      for (const AdapterSite& s : install_quadapters(o.model, o.view)) {
        const QuadapterBlock b = extract_block(o.model, o.view, s);
        CleResult cle = init_cle(b.first.weight, b.consumers.front().weight);
        for (const std::string& d : cle.diagnostics) note(s.name + ": " + d);
        o.view.adapters[s.name] = std::move(cle.params);
      }
      init_static_quantizers(o.model, o.view, d1);
      break;
    case Method::kQuadapterBc:
    case Method::kQuadapter:
    case Method::kQuadapterBcQat:
      o.phase1 = calibrate_all(o.model, o.view, d1, config.train, &o.curve);
      init_static_quantizers(o.model, o.view, d1);
      if (method == Method::kQuadapter) o.phase2 = finetune_end_to_end(o.model, o.view, d2, config.train, &o.curve);
      if (method == Method::kQuadapterBcQat) {
        o.phase2 = qat_baseline(o.model, o.view, d2, config.train, true, &o.curve);
      }
      break;
  }
  o.changed_weights = changed_weights(o.model, before);
  o.rows = evaluate(std::string(to_string(method)), o.fid, o.fraction, o.model, &o.view, corpora, config.eval);
  return o;
}

const Gate* ExperimentReport::gate(const std::string& name) const {
  for (const Gate& g : gates) {
    if (g.name == name) return &g;
  }
  return nullptr;
}

namespace {

class RowIndex {
 public:
  explicit RowIndex(const std::vector<PplRow>& rows) : rows_(rows) {}

  /// NaN when the cell is missing, so every comparison with it fails.
  double get(const std::string& method, const std::string& fid, const std::string& eval) const {
    for (const PplRow& r : rows_) {
      if (r.method == method && r.fid == fid && r.eval == eval && r.fraction == 1.0) return r.ppl;
    }
    return std::numeric_limits<double>::quiet_NaN();
  }

 private:
  const std::vector<PplRow>& rows_;
};

void write_csv(const fs::path& out, const std::string& rel, const csv::Table& t, std::vector<std::string>& artifacts) {
  csv::write(out / rel, t);
  artifacts.push_back(rel);
}

std::vector<Gate> evaluate_gates(const ExperimentReport& r, const std::vector<std::string>& names,
                                 const std::string& fid, bool audits_ok, const std::vector<std::string>& audit_fails) {
  const RowIndex ix(r.rows);
  std::vector<Gate> gates;
  const auto every = [&](const std::string& name, const std::string& lo, const std::string& hi, bool strict) {
    Gate g{name, true, ""};
    for (const std::string& c : names) {
      const double a = ix.get(lo, "none", c), b = ix.get(hi, "none", c);
      g.passed = g.passed && (strict ? a < b : a <= b);
      g.detail += c + ": " + lo + " " + fixed(a) + " vs " + hi + " " + fixed(b) + "; ";
    }
    gates.push_back(std::move(g));
  };
  every("fp_below_ptq", "fp", "ptq", true);
  every("bc_below_ptq", "quadapter_bc", "ptq", true);
  every("bc_not_above_cle", "quadapter_bc", "cle", false);
  every("ptq_clean_below_ptq", "ptq_clean", "ptq", true);

  std::string ood;
  for (const std::string& c : names) {
    if (c != fid && ood.empty()) ood = c;
  }
  {
    const double qat = ix.get("qat", fid, fid), ptq = ix.get("ptq", "none", fid);
    gates.push_back({"qat_improves_fid", qat < ptq,
                     "qat on " + fid + " " + fixed(qat) + " vs ptq " + fixed(ptq)});
  }
  {
    const double fp = ix.get("fp", "none", ood);
    const double dq = ix.get("qat", fid, ood) - fp, da = ix.get("quadapter", fid, ood) - fp;
    gates.push_back({"qat_ood_degradation_exceeds_quadapter", dq > da,
                     "on " + ood + ": qat +" + fixed(dq) + " vs quadapter +" + fixed(da)});
  }
  {
    const double q = ix.get("quadapter", fid, fid), bc = ix.get("quadapter_bc", "none", fid);
    gates.push_back({"quadapter_fid_not_above_bc", q <= bc,
                     "on " + fid + ": quadapter " + fixed(q) + " vs quadapter_bc " + fixed(bc)});
  }
  {
    Gate g{"phase1_loss_decreased", !r.phase1.empty(), ""};
    for (const BlockCalibration& b : r.phase1) {
      g.passed = g.passed && b.final_loss < b.initial_loss;
      g.detail += b.site + " x" + fixed(b.final_loss / b.initial_loss) + "; ";
    }
    gates.push_back(std::move(g));
  }
  gates.push_back({"range_ratio_decreased", r.ratio_after < r.ratio_before,
                   r.stats_site + ": " + fixed(r.ratio_before, 2) + " -> " + fixed(r.ratio_after, 2)});
  {
    std::string detail = audits_ok ? "all weight-preserving methods byte-identical" : "changed: ";
    for (const std::string& a : audit_fails) detail += a + " ";
    gates.push_back({"frozen_weight_audit", audits_ok, detail});
  }
  return gates;
}

std::string render_verdict(const ExperimentReport& r, const std::string& fid) {
  std::ostringstream os;
  os << "Quadapter experiment verdict (fine-tuning corpus for the overfitting gate: " << fid << ")\n\n";
  const auto line = [&](const char* text, const std::string& gate) {
    const Gate* g = r.gate(gate);
    os << text << ": " << (g && g->passed ? "PASS" : "FAIL") << "\n";
    if (g && !g->detail.empty()) os << "    " << g->detail << "\n";
  };
  line("FP PPL < PTQ PPL on every corpus", "fp_below_ptq");
  line("Quadapter BC PPL < PTQ PPL on every corpus", "bc_below_ptq");
  line("CLE PPL >= Quadapter BC PPL on every corpus", "bc_not_above_cle");
  line("QAT improves F-ID PPL over PTQ", "qat_improves_fid");
  line("QAT F-OOD degradation > Quadapter F-OOD degradation", "qat_ood_degradation_exceeds_quadapter");
  line("Quadapter F-ID PPL <= Quadapter BC F-ID PPL", "quadapter_fid_not_above_bc");
  line("Frozen-weight audit", "frozen_weight_audit");
  line("Phase 1 loss decreased on every block", "phase1_loss_decreased");
  line("Range ratio R decreased after Quadapter BC", "range_ratio_decreased");
  line("PTQ on the clean model beats PTQ on the surgered model", "ptq_clean_below_ptq");
  os << "\nSub-run failures: " << r.failures.size() << "\n";
  for (const std::string& f : r.failures) os << "    " << f << "\n";
  return os.str();
}

}  // namespace

ExperimentReport run_experiment(const RunConfig& config, const ToyTransformer& clean_fp, const CorpusSet& corpora,
                                const fs::path& out) {
  require(corpora.corpora.size() >= 2, ErrorKind::kConfig, "the experiment matrix needs at least two corpora");
  fs::create_directories(out / "checkpoints");
  fs::create_directories(out / "curves");
  ExperimentReport report;
  const std::vector<std::string> names = corpora.names();
  const TokenBatch d1 = calibration_set(config, corpora);

  ToyTransformer fp = clean_fp;
  const std::vector<std::string> surgered = apply_surgery(fp, config.surgery);
  report.stats_site = surgered.empty() ? adapter_sites(fp.config).front().name : surgered.front();

  std::vector<Method> methods = config.matrix_methods;
  if (methods.empty()) {
    for (Method m : all_methods()) {
      if (m != Method::kQatNoLsq) methods.push_back(m);
    }
  }
  const auto wanted = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };

  bool audits_ok = true;
  std::vector<std::string> audit_fails;
  std::optional<MethodOutcome> bc;
  const auto cell = [&](Method m, const ToyTransformer& base, const std::string& fid, double fraction,
                        const std::string& relabel) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string label = relabel.empty() ? std::string(to_string(m)) : relabel;
    try {
      MethodOutcome o = run_method(m, base, corpora, d1, config, fid, fraction);
      if (!relabel.empty()) {
        for (PplRow& r : o.rows) r.method = relabel;
      }
      label = relabel.empty() ? o.label() : relabel;
      report.rows.insert(report.rows.end(), o.rows.begin(), o.rows.end());
      const json meta{{"method", std::string(to_string(m))}, {"label", label}, {"fid", o.fid}, {"fraction", o.fraction}};
      const std::string ck = "checkpoints/" + label + ".ckpt";
      save_checkpoint(out / ck, o.model, &o.view, meta);
      report.artifacts.push_back(ck);
      if (!o.curve.records.empty()) write_csv(out, "curves/" + label + ".csv", o.curve.to_csv(), report.artifacts);
      if (!o.audit_passed()) {
        audits_ok = false;
        audit_fails.push_back(label);
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::string ppl;
      for (const PplRow& r : o.rows) ppl += " " + r.eval + "=" + fixed(r.ppl, 3);
      note(label + " done in " + fixed(secs, 1) + " s:" + ppl);
      if (m == Method::kQuadapterBc && relabel.empty()) bc = std::move(o);
    } catch (const Error& e) {
      report.failures.push_back(label + ": " + e.what());
      note("FAILED " + label + ": " + e.what());
    }
  };

  {
    const std::vector<PplRow> rows = evaluate("fp", "none", 1.0, fp, nullptr, corpora, config.eval);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  if (config.surgery.enabled) cell(Method::kPtq, clean_fp, "none", 1.0, "ptq_clean");
  for (Method m : {Method::kPtq, Method::kCle, Method::kQuadapterBc}) {
    if (wanted(m)) cell(m, fp, "none", 1.0, "");
  }
  for (const std::string& fid : names) {
    for (double f : config.eval.fractions) {
      for (Method m : {Method::kQat, Method::kQuadapterBcQat, Method::kQuadapter, Method::kQatNoLsq}) {
        if (wanted(m)) cell(m, fp, fid, f, "");
      }
    }
  }

  // Channel ranges at the surgered site before and after block calibration.
  const std::vector<int>& stats_tokens = corpora.corpora.front().test.tokens;
  try {
    const ChannelStats before = channel_stats(fp, nullptr, stats_tokens, report.stats_site, config.eval.eval_block);
    report.ratio_before = before.range_ratio();
    write_csv(out, "stats_" + report.stats_site + "_fp.csv", before.to_csv(), report.artifacts);
    if (bc) {
      const ChannelStats after =
          channel_stats(bc->model, &bc->view, stats_tokens, report.stats_site, config.eval.eval_block);
      report.ratio_after = after.range_ratio();
      write_csv(out, "stats_" + report.stats_site + "_bc.csv", after.to_csv(), report.artifacts);
      report.phase1 = bc->phase1;
    } else {
      report.ratio_after = std::numeric_limits<double>::quiet_NaN();
    }
  } catch (const Error& e) {
    report.failures.push_back(std::string("channel statistics: ") + e.what());
  }

  csv::Table phase1{{"site", "initial_loss", "final_loss", "ratio"}, {}};
  for (const BlockCalibration& b : report.phase1) {
    phase1.rows.push_back({b.site, csv::format_number(b.initial_loss), csv::format_number(b.final_loss),
                           csv::format_number(b.final_loss / b.initial_loss)});
  }
  write_csv(out, "phase1.csv", phase1, report.artifacts);
  write_csv(out, "ppl.csv", ppl_table(report.rows), report.artifacts);

  report.gates = evaluate_gates(report, names, config.fid, audits_ok, audit_fails);
  report.verdict = render_verdict(report, config.fid);
  write_file(out / "verdict.txt", report.verdict);
  report.artifacts.push_back("verdict.txt");
  return report;
}

namespace {

Manifest start_manifest(const std::string& command, const RunConfig& config) {
  Manifest m;
  m.command = command;
  m.config = config.to_json();
  m.seed = config.seed;
  for (const CorpusPaths& c : config.data.corpora) {
    for (const std::string& p : {c.train, c.valid, c.test}) m.add_input(p);
  }
  return m;
}

}  // namespace

PretrainResult cmd_pretrain(const RunConfig& config, const fs::path& out) {
  config.validate();
  const CorpusSet corpora = load_corpora(config);
  PretrainResult r;
  r.model = build_model(config.model);
  LossCurve curve;
  r.report = pretrain(r.model, corpora.joint_train(), config.train, &curve);
  r.rows = evaluate("fp", "none", 1.0, r.model, nullptr, corpora, config.eval);
  fs::create_directories(out);
  r.checkpoint = out / "fp.ckpt";
  save_checkpoint(r.checkpoint, r.model, nullptr, json{{"command", "pretrain"}});
  csv::write(out / "fp_ppl.csv", ppl_table(r.rows));
  csv::write(out / "pretrain_curve.csv", curve.to_csv());
  Manifest m = start_manifest("pretrain", config);
  for (const char* a : {"fp.ckpt", "fp_ppl.csv", "pretrain_curve.csv"}) m.add_artifact(out, a);
  m.write(out);
  return r;
}

QuantizeResult cmd_quantize(const RunConfig& config, const fs::path& fp_checkpoint, const fs::path& out) {
  config.validate();
  Checkpoint ck = load_checkpoint(fp_checkpoint);
  require(ck.model.config.vocab == config.model.vocab, ErrorKind::kConfig, "checkpoint vocabulary differs from config");
  const CorpusSet corpora = load_corpora(config);
  const TokenBatch d1 = calibration_set(config, corpora);
  apply_surgery(ck.model, config.surgery);
  QuantizeResult r;
  r.outcome = run_method(config.method, ck.model, corpora, d1, config, config.fid);
  fs::create_directories(out);
  const std::string label = r.outcome.label();
  const json meta{{"method", std::string(to_string(config.method))}, {"label", label}, {"fid", r.outcome.fid},
                  {"fraction", r.outcome.fraction}};
  r.checkpoint = out / (label + ".ckpt");
  save_checkpoint(r.checkpoint, r.outcome.model, &r.outcome.view, meta);
  csv::append(out / "ppl.csv", ppl_table(r.outcome.rows));
  Manifest m = start_manifest("quantize_" + label, config);
  m.add_input(fp_checkpoint);
  m.add_artifact(out, label + ".ckpt");
  m.add_artifact(out, "ppl.csv");
  if (!r.outcome.curve.records.empty()) {
    csv::write(out / (label + "_curve.csv"), r.outcome.curve.to_csv());
    m.add_artifact(out, label + "_curve.csv");
  }
  m.write(out);
  require(r.outcome.audit_passed(), ErrorKind::kSelfCheck, "frozen-weight audit failed for " + label);
  return r;
}

ExperimentReport cmd_experiment(const RunConfig& config, const fs::path& fp_checkpoint, const fs::path& out) {
  config.validate();
  const CorpusSet corpora = load_corpora(config);
  ToyTransformer fp;
  if (fp_checkpoint.empty()) {
    fp = cmd_pretrain(config, out).model;
  } else {
    fp = load_checkpoint(fp_checkpoint).model;
  }
  ExperimentReport report = run_experiment(config, fp, corpora, out);
  Manifest m = start_manifest("experiment", config);
  if (!fp_checkpoint.empty()) m.add_input(fp_checkpoint);
  for (const std::string& a : report.artifacts) m.add_artifact(out, a);
  m.write(out);
  return report;
}

InspectResult cmd_inspect(const RunConfig& config, const fs::path& checkpoint, const std::string& corpus,
                          const std::string& site, const fs::path& out_csv) {
  Checkpoint ck = load_checkpoint(checkpoint);
  std::vector<int> tokens;
  Manifest m;
  m.command = "inspect";
  m.config = config.to_json();
  m.seed = config.seed;
  m.add_input(checkpoint);
  if (fs::is_regular_file(corpus)) {
    tokens = load_corpus(corpus, corpus).tokens;
    m.add_input(corpus);
  } else {
    tokens = load_corpora(config).find(corpus).test.tokens;
  }
  InspectResult r;
  const std::size_t block = std::min<std::size_t>(config.eval.eval_block, ck.model.config.max_seq);
  r.stats = channel_stats(ck.model, ck.view ? &*ck.view : nullptr, tokens, site, block);
  r.ratio = r.stats.range_ratio();
  csv::write(out_csv, r.stats.to_csv());
  const fs::path dir = out_csv.has_parent_path() ? out_csv.parent_path() : fs::path(".");
  m.add_artifact(dir, out_csv.filename().string());
  m.write(dir);
  return r;
}

FoldResult cmd_fold(const fs::path& checkpoint, const fs::path& out_checkpoint) {
  Checkpoint ck = load_checkpoint(checkpoint);
  require(ck.view.has_value(), ErrorKind::kData, "checkpoint has no quantized view to fold");
  const ModelConfig& c = ck.model.config;
  FoldResult r;
  const std::size_t seq = static_cast<std::size_t>(std::min(c.max_seq, 64));
  TokenBatch probe{{}, 2, seq};
  std::mt19937_64 rng(0xF01Dull);
  std::uniform_int_distribution<int> tok(0, c.vocab - 1);
  for (std::size_t i = 0; i < probe.batch * probe.seq; ++i) probe.tokens.push_back(tok(rng));
  r.probe_tokens = probe.tokens.size();

  QuantizedView unfolded_view = *ck.view;
  const Tensor reference = forward_logits(ck.model, &unfolded_view, probe, QuantSwitch::kOn);
  ToyTransformer folded = ck.model;
  QuantizedView folded_view = *ck.view;
  fold_commit(folded, folded_view);
  const Tensor got = forward_logits(folded, &folded_view, probe, QuantSwitch::kOn);
  r.max_abs_deviation = max_abs_diff(reference, got);
  require(bit_equal(reference, got), ErrorKind::kSelfCheck,
          "fold self-check failed: max abs deviation " + csv::format_number(r.max_abs_deviation));

  json meta = ck.meta;
  meta["folded"] = true;
  save_checkpoint(out_checkpoint, folded, &folded_view, meta);
  Manifest m;
  m.command = "fold";
  m.config = json{{"model", to_json(c)}};
  m.seed = c.seed;
  m.add_input(checkpoint);
  const fs::path dir = out_checkpoint.has_parent_path() ? out_checkpoint.parent_path() : fs::path(".");
  m.add_artifact(dir, out_checkpoint.filename().string());
  m.write(dir);
  return r;
}

}  // namespace quadapter
