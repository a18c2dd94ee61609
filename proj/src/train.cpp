// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "quadapter/adam.hpp"
#include "quadapter/error.hpp"
#include "quadapter/ops.hpp"

namespace quadapter {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.cols();
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.ptr() + rows[i] * d, d, out.ptr() + i * d);
  }
  return out;
}

double mse_value(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::kDimension, "mse shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a[i] - b[i];
    s += e * e;
  }
  return s / static_cast<double>(a.size());
}

bool is_activation_site(const std::vector<QuantAttachment>& attachments, const std::string& site) {
  return std::any_of(attachments.begin(), attachments.end(), [&](const QuantAttachment& a) {
    return a.site == site && a.target == QuantTarget::kActivation;
  });
}

/// Rethrows non-finite values met during training as training errors.
template <typename F>
auto guard_training(const std::string& where, int step, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNonFinite) throw;
    fail(ErrorKind::kTraining, where + " diverged at step " + std::to_string(step) + ": " + e.what());
  }
}

double linear_decay(int step, int steps) {
  return 1.0 - static_cast<double>(step) / static_cast<double>(steps);
}

void check_stream(std::span<const int> tokens, std::size_t seq, const char* what) {
  require(tokens.size() > seq + 1, ErrorKind::kData,
          std::string(what) + " has " + std::to_string(tokens.size()) + " tokens, need more than " +
              std::to_string(seq + 1));
}

}  // namespace

void TrainPlan::validate() const {
  const auto nonneg = [](double v, const char* what) {
    require(std::isfinite(v) && v >= 0.0, ErrorKind::kConfig, std::string(what) + " must be finite and >= 0");
  };
  nonneg(phase1.lr, "phase1.lr");
  nonneg(phase1.decay, "phase1.decay");
  nonneg(phase2.lr_alpha, "phase2.lr_alpha");
  nonneg(phase2.lr_theta, "phase2.lr_theta");
  nonneg(phase2.lr_weights, "phase2.lr_weights");
  nonneg(pretrain.lr, "pretrain.lr");
  require(phase1.steps >= 1, ErrorKind::kConfig, "phase1.steps must be >= 1");
  require(phase1.decay_interval >= 1, ErrorKind::kConfig, "phase1.decay_interval must be >= 1");
  require(phase1.batch_rows >= 1, ErrorKind::kConfig, "phase1.batch_rows must be >= 1");
  require(phase2.steps >= 0 && pretrain.steps >= 0, ErrorKind::kConfig, "step counts must be >= 0");
  require(pretrain.warmup >= 0, ErrorKind::kConfig, "pretrain.warmup must be >= 0");
  require(phase2.batch >= 1 && phase2.block >= 1, ErrorKind::kConfig, "phase2 batch and block must be >= 1");
  require(pretrain.batch >= 1 && pretrain.block >= 1, ErrorKind::kConfig, "pretrain batch and block must be >= 1");
}

csv::Table LossCurve::to_csv() const {
  csv::Table t{{"step", "block", "loss"}, {}};
  for (const Record& r : records) t.rows.push_back({std::to_string(r.step), r.block, csv::format_number(r.loss)});
  return t;
}

TokenBatch make_calibration_set(const std::vector<const Corpus*>& corpora, std::size_t per_corpus, std::size_t seq,
                                std::uint64_t seed) {
  require(!corpora.empty() && per_corpus > 0 && seq > 0, ErrorKind::kData, "empty calibration set requested");
  std::mt19937_64 rng(seed);
  TokenBatch d1{{}, corpora.size() * per_corpus, seq};
  for (const Corpus* c : corpora) {
    require(c->tokens.size() >= seq, ErrorKind::kData, "corpus " + c->name + " is shorter than a calibration row");
    std::uniform_int_distribution<std::size_t> start(0, c->tokens.size() - seq);
    for (std::size_t i = 0; i < per_corpus; ++i) {
      const std::size_t s = start(rng);
      d1.tokens.insert(d1.tokens.end(), c->tokens.begin() + s, c->tokens.begin() + s + seq);
    }
  }
  return d1;
}

TrainingBatch sample_batch(std::span<const int> tokens, std::size_t batch, std::size_t seq, std::mt19937_64& rng) {
  check_stream(tokens, seq, "training stream");
  std::uniform_int_distribution<std::size_t> start(0, tokens.size() - seq - 1);
  TrainingBatch b{{{}, batch, seq}, {}};
  b.inputs.tokens.reserve(batch * seq);
  b.targets.reserve(batch * seq);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t s = start(rng);
    b.inputs.tokens.insert(b.inputs.tokens.end(), tokens.begin() + s, tokens.begin() + s + seq);
    b.targets.insert(b.targets.end(), tokens.begin() + s + 1, tokens.begin() + s + 1 + seq);
  }
  return b;
}

namespace {

BlockIOCache gather_sites(const ToyTransformer& model, const TokenBatch& d1, const std::vector<AdapterSite>& sites) {
  require(d1.batch > 0 && !d1.tokens.empty(), ErrorKind::kData, "calibration set is empty");
  BlockIOCache cache;
  ActivationProbe probe = [&](const std::string& name, const Tensor& v) {
    for (const AdapterSite& s : sites) {
      if (name == s.name + ".in") cache[s.name] = BlockIO{s.name, v, {}};
    }
  };
  Graph g;
  ForwardOptions opt;
  opt.probe = &probe;
  forward(g, model, nullptr, d1, opt);
  const QuantizedView plain;
  for (const AdapterSite& s : sites) {
    auto it = cache.find(s.name);
    require(it != cache.end(), ErrorKind::kIndex, "site '" + s.name + "' was not reached");
    it->second.outputs = reference_forward(it->second.inputs, extract_block(model, plain, s));
  }
  return cache;
}

}  // namespace

BlockIO gather_block_io(const ToyTransformer& model, const TokenBatch& d1, const AdapterSite& site) {
  return gather_sites(model, d1, {site}).at(site.name);
}

double block_loss(QuadapterBlock& block, const BlockIO& io) {
  const std::vector<Tensor> out = block_forward(io.inputs, block, QuantSwitch::kOn);
  require(out.size() == io.outputs.size(), ErrorKind::kDimension, "consumer count mismatch");
  double loss = 0.0;
  for (std::size_t c = 0; c < out.size(); ++c) loss += mse_value(out[c], io.outputs[c]);
  return loss / static_cast<double>(out.size());
}

BlockCalibration calibrate_block(QuadapterBlock& block, const BlockIO& io, const Phase1Plan& plan,
                                 std::mt19937_64& rng, LossCurve* curve) {
  const auto t0 = Clock::now();
  block.validate();
  require(io.outputs.size() == block.consumers.size(), ErrorKind::kDimension, "cache does not match the block");
  require(io.inputs.rank() == 2 && io.inputs.cols() == block.width(), ErrorKind::kDimension,
          "cached inputs have the wrong width");
  const auto dynamic = [](const QuantizerState& q) { return q.mode == QuantMode::kDynamic; };
  require(dynamic(block.first_weight_q) && dynamic(block.activation_q) &&
              std::all_of(block.consumer_weight_q.begin(), block.consumer_weight_q.end(), dynamic),
          ErrorKind::kContract, "block calibration uses dynamic quantizers");
  require(plan.steps >= 1 && plan.decay_interval >= 1 && plan.batch_rows >= 1, ErrorKind::kConfig,
          "invalid phase 1 plan");

  BlockCalibration report;
  report.site = block.name;
  report.initial_loss = block_loss(block, io);
  require(std::isfinite(report.initial_loss), ErrorKind::kTraining, "initial loss of " + block.name + " is not finite");
  double best = report.initial_loss;
  Tensor best_alpha = block.params.alpha;

  const std::size_t n = io.inputs.rows();
  const std::size_t rows = std::min(plan.batch_rows, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  AdamState adam = AdamState::for_shape(block.params.alpha.shape());
  // Batch statistics stay on the tape so alpha sees what it does to the ranges.
  const QuantRun run{QuantSwitch::kOn, false, nullptr, nullptr, true};
  for (int step = 0; step < plan.steps; ++step) {
    if (cursor + rows > n) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::span<const std::size_t> pick(order.data() + cursor, rows);
    cursor += rows;
    const double lr = plan.lr * std::pow(plan.decay, step / plan.decay_interval);

    const double loss_value = guard_training(block.name, step, [&] {
      Graph g;
      Var alpha = g.leaf(block.params.alpha, true, block.name + ".alpha");
      const std::vector<Var> out = block_forward(g.constant(gather_rows(io.inputs, pick)), block, alpha, run);
      Var loss = mse(out[0], g.constant(gather_rows(io.outputs[0], pick)));
      for (std::size_t c = 1; c < out.size(); ++c) {
        loss = add(loss, mse(out[c], g.constant(gather_rows(io.outputs[c], pick))));
      }
      loss = scale(loss, 1.0 / static_cast<double>(out.size()));
      g.backward(loss);
      adam_step(block.params.alpha, g.grad(alpha), adam, lr);
      block.params.clamp();
      return g.value(loss).item();
    });
    if (curve) curve->add(step, block.name, loss_value);

    {
      const double full = block_loss(block, io);
      require(std::isfinite(full), ErrorKind::kTraining,
              block.name + " produced a non-finite loss at step " + std::to_string(step + 1));
      if (full < best) {
        best = full;
        best_alpha = block.params.alpha;
        report.best_step = step + 1;
      }
    }
  }
  block.params.alpha = best_alpha;
  report.final_loss = best;
  report.seconds = seconds_since(t0);
  return report;
}

std::vector<BlockCalibration> calibrate_all(const ToyTransformer& model, QuantizedView& view, const TokenBatch& d1,
                                            const TrainPlan& plan, LossCurve* curve) {
  const std::vector<AdapterSite> sites = adapter_sites(model.config);
  if (!view.has_adapters()) install_quadapters(model, view);
  const BlockIOCache cache = gather_sites(model, d1, sites);
  std::mt19937_64 rng(plan.seed);
  std::vector<BlockCalibration> reports;
  for (const AdapterSite& s : sites) {
    QuadapterBlock block = extract_block(model, view, s);
    try {
      reports.push_back(calibrate_block(block, cache.at(s.name), plan.phase1, rng, curve));
    } catch (const Error& e) {
      fail(e.kind(), "calibrating block '" + s.name + "': " + e.what());
    }
    view.adapters[s.name] = block.params;
  }
  return reports;
}

void init_static_quantizers(const ToyTransformer& model, QuantizedView& view, const TokenBatch& d1) {
  require(d1.batch > 0 && !d1.tokens.empty(), ErrorKind::kData, "calibration set is empty");
  const std::vector<QuantAttachment> attachments = quant_attachments(model.config);
  for (auto& [site, q] : view.quantizers) {
    q.mode = is_activation_site(attachments, site) ? QuantMode::kStatic : QuantMode::kDynamic;
    q.observed = false;
    q.theta_min = q.theta_max = 0.0;
  }
  Graph g;
  ForwardOptions opt;
  opt.run.mode = QuantSwitch::kObserve;
  forward(g, model, &view, d1, opt);
  for (const auto& [site, q] : view.quantizers) {
    require(q.observed, ErrorKind::kData, "quantizer '" + site + "' saw no calibration data");
  }
}

void make_learned(QuantizedView& view) {
  for (auto& [site, q] : view.quantizers) {
    if (q.mode == QuantMode::kStatic) q.mode = QuantMode::kLearned;
  }
}

namespace {

/// Shared loop of end-to-end fine-tuning and QAT.
FinetuneReport train_quantized(ToyTransformer* trainable, const ToyTransformer& model, QuantizedView& view,
                               std::span<const int> d2, const TrainPlan& plan, bool train_alpha, bool train_theta,
                               const std::string& tag, LossCurve* curve) {
  const auto t0 = Clock::now();
  const Phase2Plan& p = plan.phase2;
  FinetuneReport report;
  if (p.steps == 0) return report;
  check_stream(d2, p.block, "fine-tuning data");
  for (const auto& [site, q] : view.quantizers) {
    require(q.mode == QuantMode::kDynamic || q.observed, ErrorKind::kContract,
            "quantizer '" + site + "' needs static initialization before fine-tuning");
  }
  make_learned(view);

  std::mt19937_64 rng(plan.seed ^ 0x5151F00Dull);
  std::map<std::string, AdamState> alpha_state, theta_state, weight_state;
  for (int step = 0; step < p.steps; ++step) {
    const double f = linear_decay(step, p.steps);
    const TrainingBatch batch = sample_batch(d2, p.batch, p.block, rng);
    const double loss_value = guard_training(tag, step, [&] {
      Graph g;
      ForwardOptions opt;
      opt.run.mode = QuantSwitch::kOn;
      opt.run.train_theta = train_theta;
      opt.train_alpha = train_alpha;
      opt.train_weights = trainable != nullptr;
      ModelVars vars;
      Var logits = forward(g, model, &view, batch.inputs, opt, &vars);
      Var loss = softmax_cross_entropy(logits, batch.targets);
      g.backward(loss);
      if (train_alpha) {
        for (const auto& [site, v] : vars.alphas) {
          QuadapterParams& a = view.adapters.at(site);
          auto [it, _] = alpha_state.try_emplace(site, AdamState::for_shape(a.alpha.shape()));
          adam_step(a.alpha, g.grad(v), it->second, p.lr_alpha * f);
          a.clamp();
        }
      }
      if (train_theta) {
        for (const auto& [site, v] : vars.thetas) {
          QuantizerState& q = view.quantizer(site);
          if (!q.trainable()) continue;
          Tensor theta = Tensor::vector({q.theta_min, q.theta_max});
          auto [it, _] = theta_state.try_emplace(site, AdamState::for_shape(theta.shape()));
          adam_step(theta, g.grad(v), it->second, p.lr_theta * f);
          assign_learned_range(q, theta[0], theta[1]);
        }
      }
      if (trainable) {
        for (const auto& [name, v] : vars.params) {
          Tensor& w = trainable->parameter(name);
          auto [it, _] = weight_state.try_emplace(name, AdamState::for_shape(w.shape()));
          adam_step(w, g.grad(v), it->second, p.lr_weights * f);
        }
      }
      return g.value(loss).item();
    });
    if (step == 0) report.first_loss = loss_value;
    report.last_loss = loss_value;
    if (curve) curve->add(step, tag, loss_value);
  }
  report.steps = p.steps;
  report.seconds = seconds_since(t0);
  return report;
}

}  // namespace

FinetuneReport finetune_end_to_end(const ToyTransformer& model, QuantizedView& view, std::span<const int> d2,
                                   const TrainPlan& plan, LossCurve* curve) {
  require(view.has_adapters(), ErrorKind::kContract, "end-to-end fine-tuning needs installed adapters");
  return train_quantized(nullptr, model, view, d2, plan, true, true, "e2e", curve);
}

FinetuneReport qat_baseline(ToyTransformer& model, QuantizedView& view, std::span<const int> d2,
                            const TrainPlan& plan, bool train_theta, LossCurve* curve) {
  return train_quantized(&model, model, view, d2, plan, false, train_theta, "qat", curve);
}

FinetuneReport pretrain(ToyTransformer& model, std::span<const int> tokens, const TrainPlan& plan, LossCurve* curve) {
  const auto t0 = Clock::now();
  const PretrainPlan& p = plan.pretrain;
  FinetuneReport report;
  if (p.steps == 0) return report;
  check_stream(tokens, p.block, "pretraining data");
  std::mt19937_64 rng(plan.seed ^ 0x9E77A1Dull);
  std::map<std::string, AdamState> state;
  constexpr double kClipNorm = 1.0;
  for (int step = 0; step < p.steps; ++step) {
    const double warm = p.warmup > 0 ? std::min(1.0, static_cast<double>(step + 1) / p.warmup) : 1.0;
    const double lr = p.lr * warm * linear_decay(step, p.steps);
    const TrainingBatch batch = sample_batch(tokens, p.batch, p.block, rng);
    const double loss_value = guard_training("pretrain", step, [&] {
      Graph g;
      ForwardOptions opt;
      opt.train_weights = true;
      ModelVars vars;
      Var loss = softmax_cross_entropy(forward(g, model, nullptr, batch.inputs, opt, &vars), batch.targets);
      g.backward(loss);
      std::vector<std::pair<std::string, Tensor>> grads;
      double sq = 0.0;
      for (const auto& [name, v] : vars.params) {
        grads.emplace_back(name, g.grad(v));
        for (double x : grads.back().second.data()) sq += x * x;
      }
      const double norm = std::sqrt(sq);
      const double clip = norm > kClipNorm ? kClipNorm / norm : 1.0;
      for (auto& [name, grad] : grads) {
        if (clip != 1.0) {
          for (double& x : grad.data()) x *= clip;
        }
        Tensor& w = model.parameter(name);
        auto [it, _] = state.try_emplace(name, AdamState::for_shape(w.shape()));
        adam_step(w, grad, it->second, lr);
      }
      return g.value(loss).item();
    });
    if (step == 0) report.first_loss = loss_value;
    report.last_loss = loss_value;
    if (curve) curve->add(step, "pretrain", loss_value);
  }
  report.steps = p.steps;
  report.seconds = seconds_since(t0);
  return report;
}

WeightSnapshot snapshot_weights(const ToyTransformer& model) {
  WeightSnapshot s;
  for (const auto& [name, t] : model.parameters()) s.emplace_back(name, *t);
  return s;
}

std::vector<std::string> changed_weights(const ToyTransformer& model, const WeightSnapshot& snapshot) {
  std::vector<std::string> changed;
  const auto params = model.parameters();
  require(params.size() == snapshot.size(), ErrorKind::kContract, "snapshot does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != snapshot[i].first || !bit_equal(*params[i].second, snapshot[i].second)) {
      changed.push_back(snapshot[i].first);
    }
  }
  return changed;
}

}  // namespace quadapter
