// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

#include "quadapter/autodiff.hpp"

namespace quadapter {

// Products. Linear layers store weights as [out x in]; linear() computes
// x * W^T + b over the rows of x.
Var matmul(Var a, Var b);
Var linear(Var x, Var weight);
Var linear(Var x, Var weight, Var bias);

// Elementwise and broadcasting arithmetic.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var reciprocal(Var x);
Var add_rowvec(Var x, Var v);  // x[r, c] + v[c]
Var mul_rowvec(Var x, Var v);  // x[r, c] * v[c]  (scales columns)
Var mul_colvec(Var x, Var v);  // x[r, c] * v[r]  (scales rows)

// Reductions.
Var sum(Var x);
Var mean(Var x);
Var mse(Var a, Var b);

// Normalization over the last axis with population variance.
Var normalize(Var x, double eps);
Var layer_norm(Var x, Var gamma, Var beta, double eps);

enum class PiecewiseKind { kRelu, kLeakyRelu };

struct PiecewiseLinear {
  PiecewiseKind kind = PiecewiseKind::kRelu;
  double slope = 0.0;  // negative-side slope, leaky only

  static PiecewiseLinear relu() { return {PiecewiseKind::kRelu, 0.0}; }
  static PiecewiseLinear leaky_relu(double slope) { return {PiecewiseKind::kLeakyRelu, slope}; }
  double operator()(double x) const;
};

Var piecewise_linear(Var x, PiecewiseLinear f);
Var gelu(Var x);
double gelu_value(double x);

/// Mean next-token negative log-likelihood over the rows of logits.
Var softmax_cross_entropy(Var logits, std::span<const int> targets);

/// Row gather: out[i] = table[ids[i]].
Var embedding(Var table, std::span<const int> ids);

// Causal multi-head attention pieces over a fused [batch*seq x 3*d] QKV
// tensor laid out as (q | k | v), heads contiguous inside each part.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
};

/// Scaled scores, [batch*heads*seq x seq]; masked entries are 0.
Var attention_scores(Var qkv, AttentionShape s);
/// Row softmax over the causal prefix; masked entries are 0.
Var causal_softmax(Var scores, std::size_t seq);
/// probs * V, reassembled to [batch*seq x d].
Var attention_context(Var probs, Var qkv, AttentionShape s);

}  // namespace quadapter
