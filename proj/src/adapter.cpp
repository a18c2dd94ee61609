// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/adapter.hpp"

#include <algorithm>
#include <cmath>

#include "quadapter/error.hpp"

namespace quadapter {

std::string_view to_string(LayerKind kind) {
  return kind == LayerKind::kLinear ? "linear" : "layernorm";
}

std::string_view to_string(InterveningOp op) {
  switch (op) {
    case InterveningOp::kNone: return "none";
    case InterveningOp::kRelu: return "relu";
    case InterveningOp::kLeakyRelu: return "leaky_relu";
    case InterveningOp::kGelu: return "gelu";
    case InterveningOp::kTanh: return "tanh";
    case InterveningOp::kSoftmax: return "softmax";
    case InterveningOp::kResidual: return "residual";
  }
  return "none";
}

Applicability check_applicability(LayerKind first, InterveningOp op, LayerKind second) {
  (void)first;  // both producer kinds are scalable per output channel
  if (second != LayerKind::kLinear) {
    return {false, "consumer must be a linear layer to absorb the inverse scale"};
  }
  switch (op) {
    case InterveningOp::kNone:
    case InterveningOp::kRelu:
    case InterveningOp::kLeakyRelu:
      return {true, "scaling-invariant path"};
    case InterveningOp::kGelu:
    case InterveningOp::kTanh:
    case InterveningOp::kSoftmax:
      return {false, "non-scaling-invariant activation (" + std::string(to_string(op)) + ")"};
    case InterveningOp::kResidual:
      return {false, "residual junction between the layers"};
  }
  return {false, "unknown intervening op"};
}

void QuadapterParams::clamp() {
  for (double& a : alpha.data()) a = std::max(a, kMinAlpha);
}

QuadapterParams init_identity(std::size_t d) {
  require(d >= 1, ErrorKind::kDimension, "adapter width must be positive");
  return QuadapterParams{Tensor({d}, 1.0)};
}

namespace {

std::vector<double> row_ranges(const Tensor& first) {
  const std::size_t d = first.shape().at(0);
  const std::size_t k = first.size() / d;
  std::vector<double> r(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < k; ++j) r[i] = std::max(r[i], std::abs(first[i * k + j]));
  }
  return r;
}

}  // namespace

CleResult init_cle(const Tensor& first, const std::vector<const Tensor*>& seconds) {
  require(!seconds.empty(), ErrorKind::kContract, "CLE needs at least one consumer");
  const std::size_t d = first.shape().at(0);
  const std::vector<double> r1 = row_ranges(first);
  std::vector<double> r2(d, 0.0);
  for (const Tensor* w2 : seconds) {
    require(w2->rank() == 2 && w2->cols() == d, ErrorKind::kDimension,
            "consumer weight " + shape_string(w2->shape()) + " does not have " + std::to_string(d) + " columns");
    for (std::size_t r = 0; r < w2->rows(); ++r) {
      for (std::size_t i = 0; i < d; ++i) r2[i] = std::max(r2[i], std::abs(w2->at(r, i)));
    }
  }
  CleResult result{init_identity(d), {}, {}};
  for (std::size_t i = 0; i < d; ++i) {
    if (r1[i] == 0.0 || r2[i] == 0.0) {
      result.dead_channels.push_back(i);
      result.diagnostics.push_back("CLE: channel " + std::to_string(i) + " is dead (r1=" + std::to_string(r1[i]) +
                                   ", r2=" + std::to_string(r2[i]) + "); keeping alpha=1");
      continue;
    }
    result.params.alpha[i] = std::sqrt(r2[i] / r1[i]);
  }
  return result;
}

CleResult init_cle(const Tensor& first, const Tensor& second) {
  return init_cle(first, std::vector<const Tensor*>{&second});
}

void QuadapterBlock::validate() const {
  const std::size_t d = width();
  require(first.weight.rank() == (first.kind == LayerKind::kLinear ? 2u : 1u), ErrorKind::kDimension,
          "first-layer weight has the wrong rank for " + std::string(to_string(first.kind)));
  require(first.bias.empty() || first.bias.size() == d, ErrorKind::kDimension, "first-layer bias length mismatch");
  require(params.alpha.size() == d, ErrorKind::kDimension, "alpha length does not match block width");
  require(!consumers.empty(), ErrorKind::kContract, "block '" + name + "' has no consumer");
  require(consumer_weight_q.size() == consumers.size(), ErrorKind::kContract, "one weight quantizer per consumer");
  for (const LinearLayer& c : consumers) {
    require(c.in_features() == d, ErrorKind::kDimension,
            "consumer input width " + std::to_string(c.in_features()) + " != block width " + std::to_string(d));
  }
}

QuadapterBlock make_block(std::string name, FirstLayer first, std::vector<LinearLayer> consumers, int bits,
                          std::optional<PiecewiseLinear> activation) {
  QuadapterBlock b;
  b.name = std::move(name);
  b.first = std::move(first);
  b.activation = activation;
  b.consumers = std::move(consumers);
  b.first_weight_q = make_quantizer(bits);
  b.activation_q = make_quantizer(bits);
  b.consumer_weight_q.assign(b.consumers.size(), make_quantizer(bits));
  b.params = init_identity(b.first.width());
  b.validate();
  return b;
}

Var adapted_activation(Var x, const FirstLayerVars& first, const Var* alpha, QuantizerState& first_weight_q,
                       QuantizerState& activation_q, const std::optional<PiecewiseLinear>& activation,
                       const QuantRun& run, const std::string& name) {
  Var w = first.weight;
  std::optional<Var> b = first.bias;
  if (alpha) {
    w = first.kind == LayerKind::kLinear ? mul_colvec(w, *alpha) : mul(w, *alpha);
    if (b) b = mul(*b, *alpha);
  }
  w = quantize_site(w, first_weight_q, run, name + ".weight");
  Var u = first.kind == LayerKind::kLinear ? (b ? linear(x, w, *b) : linear(x, w)) : mul_rowvec(x, w);
  if (first.kind == LayerKind::kLayerNorm && b) u = add_rowvec(u, *b);
  Var a = quantize_site(u, activation_q, run, name + ".out");
  if (activation) a = piecewise_linear(a, *activation);
  return a;
}

Var adapted_consumer(Var a, Var weight, const std::optional<Var>& bias, const Var* inv_alpha,
                     QuantizerState& weight_q, const QuantRun& run, const std::string& name) {
  Var w = inv_alpha ? mul_rowvec(weight, *inv_alpha) : weight;
  w = quantize_site(w, weight_q, run, name + ".weight");
  return bias ? linear(a, w, *bias) : linear(a, w);
}

namespace {

std::vector<Var> block_forward_impl(Var x, QuadapterBlock& block, const FirstLayer& first,
                                    const std::vector<const Tensor*>& consumer_weights, const Var* alpha,
                                    const QuantRun& run) {
  Graph& g = *x.graph;
  FirstLayerVars fv{first.kind, g.constant(first.weight), std::nullopt};
  if (!first.bias.empty()) fv.bias = g.constant(first.bias);
  Var a = adapted_activation(x, fv, alpha, block.first_weight_q, block.activation_q, block.activation, run,
                             block.name);
  std::optional<Var> inv;
  if (alpha) inv = reciprocal(*alpha);
  std::vector<Var> outs;
  for (std::size_t c = 0; c < block.consumers.size(); ++c) {
    std::optional<Var> bias;
    if (block.consumers[c].has_bias()) bias = g.constant(block.consumers[c].bias);
    outs.push_back(adapted_consumer(a, g.constant(*consumer_weights[c]), bias, inv ? &*inv : nullptr,
                                    block.consumer_weight_q[c], run,
                                    block.name + ".consumer" + std::to_string(c)));
  }
  return outs;
}

std::vector<const Tensor*> consumer_weight_ptrs(const QuadapterBlock& block) {
  std::vector<const Tensor*> ws;
  for (const LinearLayer& c : block.consumers) ws.push_back(&c.weight);
  return ws;
}

std::vector<Tensor> values_of(const std::vector<Var>& vars) {
  std::vector<Tensor> out;
  for (Var v : vars) out.push_back(v.value());
  return out;
}

}  // namespace

std::vector<Var> block_forward(Var x, QuadapterBlock& block, Var alpha, const QuantRun& run) {
  block.validate();
  require(alpha.value().size() == block.width(), ErrorKind::kDimension, "alpha width mismatch");
  return block_forward_impl(x, block, block.first, consumer_weight_ptrs(block), &alpha, run);
}

std::vector<Tensor> block_forward(const Tensor& x, QuadapterBlock& block, QuantSwitch mode) {
  Graph g;
  QuantRun run{mode, false, nullptr};
  return values_of(block_forward(g.constant(x), block, g.constant(block.params.alpha), run));
}

std::vector<Tensor> reference_forward(const Tensor& x, const QuadapterBlock& block) {
  Graph g;
  Var xv = g.constant(x);
  Var u;
  Var w1 = g.constant(block.first.weight);
  if (block.first.kind == LayerKind::kLinear) {
    u = block.first.bias.empty() ? linear(xv, w1) : linear(xv, w1, g.constant(block.first.bias));
  } else {
    u = mul_rowvec(xv, w1);
    if (!block.first.bias.empty()) u = add_rowvec(u, g.constant(block.first.bias));
  }
  if (block.activation) u = piecewise_linear(u, *block.activation);
  std::vector<Tensor> outs;
  for (const LinearLayer& c : block.consumers) {
    Var w2 = g.constant(c.weight);
    outs.push_back((c.has_bias() ? linear(u, w2, g.constant(c.bias)) : linear(u, w2)).value());
  }
  return outs;
}

FoldedWeights fold(const FirstLayer& first, const std::vector<const Tensor*>& consumer_weights, const Tensor& alpha) {
  const std::size_t d = first.width();
  require(alpha.size() == d, ErrorKind::kDimension, "alpha width mismatch in fold");
  for (double a : alpha.data()) {
    require(std::isfinite(a) && a > 0.0, ErrorKind::kContract, "fold needs finite positive alpha");
  }
  FoldedWeights f;
  // Same arithmetic as the adapted forward so both paths agree bit for bit.
  f.first_weight = first.weight;
  const std::size_t k = first.weight.size() / d;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < k; ++j) f.first_weight[i * k + j] *= alpha[i];
  }
  f.first_bias = first.bias;
  for (std::size_t i = 0; i < f.first_bias.size(); ++i) f.first_bias[i] *= alpha[i];
  for (const Tensor* w : consumer_weights) {
    require(w->rank() == 2 && w->cols() == d, ErrorKind::kDimension, "consumer weight width mismatch in fold");
    Tensor w2 = *w;
    for (std::size_t r = 0; r < w2.rows(); ++r) {
      for (std::size_t i = 0; i < d; ++i) w2[r * d + i] *= 1.0 / alpha[i];
    }
    f.consumer_weights.push_back(std::move(w2));
  }
  return f;
}

FoldedWeights fold(const QuadapterBlock& block) {
  block.validate();
  return fold(block.first, consumer_weight_ptrs(block), block.params.alpha);
}

UnfoldedWeights unfold(const FoldedWeights& folded, const Tensor& alpha) {
  const std::size_t d = alpha.size();
  for (double a : alpha.data()) {
    require(std::isfinite(a) && a > 0.0, ErrorKind::kContract, "unfold needs finite positive alpha");
  }
  require(folded.first_weight.shape().at(0) == d, ErrorKind::kDimension, "alpha width mismatch in unfold");
  UnfoldedWeights u{folded.first_weight, folded.first_bias, folded.consumer_weights};
  const std::size_t k = u.first_weight.size() / d;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < k; ++j) u.first_weight[i * k + j] /= alpha[i];
  }
  for (std::size_t i = 0; i < u.first_bias.size(); ++i) u.first_bias[i] /= alpha[i];
  for (Tensor& w2 : u.consumer_weights) {
    for (std::size_t r = 0; r < w2.rows(); ++r) {
      for (std::size_t i = 0; i < d; ++i) w2[r * d + i] *= alpha[i];
    }
  }
  return u;
}

std::vector<Tensor> folded_forward(const Tensor& x, QuadapterBlock& block, const FoldedWeights& folded,
                                   QuantSwitch mode) {
  block.validate();
  require(folded.consumer_weights.size() == block.consumers.size(), ErrorKind::kDimension,
          "folded consumer count mismatch");
  FirstLayer first{block.first.kind, folded.first_weight, folded.first_bias};
  std::vector<const Tensor*> ws;
  for (const Tensor& w : folded.consumer_weights) ws.push_back(&w);
  Graph g;
  QuantRun run{mode, false, nullptr};
  return values_of(block_forward_impl(g.constant(x), block, first, ws, nullptr, run));
}

}  // namespace quadapter
