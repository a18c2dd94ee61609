// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "quadapter/autodiff.hpp"
#include "quadapter/ops.hpp"
#include "quadapter/quant.hpp"
#include "quadapter/tensor.hpp"

namespace quadapter {

// ---------------------------------------------------------------------------
// Applicability
// ---------------------------------------------------------------------------

enum class LayerKind { kLinear, kLayerNorm };

/// What sits between the two layers an adapter spans.
enum class InterveningOp { kNone, kRelu, kLeakyRelu, kGelu, kTanh, kSoftmax, kResidual };

std::string_view to_string(LayerKind kind);
std::string_view to_string(InterveningOp op);

struct Applicability {
  bool accepted = false;
  std::string reason;

  explicit operator bool() const noexcept { return accepted; }
};

/// An adapter needs f(s*x) = s*f(x) for s > 0 between a linear or layer-norm
/// producer and a linear consumer.
Applicability check_applicability(LayerKind first, InterveningOp op, LayerKind second);

// ---------------------------------------------------------------------------
// Parameters and layers
// ---------------------------------------------------------------------------

/// Per-channel scale alpha; every entry stays >= kMinAlpha.
struct QuadapterParams {
  static constexpr double kMinAlpha = 1e-4;
  Tensor alpha;

  std::size_t width() const noexcept { return alpha.size(); }
  void clamp();
};

QuadapterParams init_identity(std::size_t d);

struct CleResult {
  QuadapterParams params;
  std::vector<std::size_t> dead_channels;
  std::vector<std::string> diagnostics;
};

/// Cross-layer equalization: alpha_i = sqrt(r2_i / r1_i) with r1_i the max
/// magnitude of row i of first ([d x k] or [d]) and r2_i the max magnitude of
/// column i of second ([m x d]). Dead channels keep alpha_i = 1.
CleResult init_cle(const Tensor& first, const Tensor& second);
/// Same, with the column ranges taken jointly over several consumers.
CleResult init_cle(const Tensor& first, const std::vector<const Tensor*>& seconds);

/// Weight [out x in] and bias [out]. bias may be empty.
struct LinearLayer {
  Tensor weight;
  Tensor bias;

  bool has_bias() const noexcept { return !bias.empty(); }
  std::size_t in_features() const { return weight.shape().at(1); }
  std::size_t out_features() const { return weight.shape().at(0); }
};

/// The producer side. Linear: weight [d x k], bias [d]. Layer norm: the
/// affine part only, weight = gamma [d], bias = beta [d]; the block input is
/// then the normalized activation.
struct FirstLayer {
  LayerKind kind = LayerKind::kLinear;
  Tensor weight;
  Tensor bias;

  std::size_t width() const { return weight.shape().at(0); }
};

/// One adapter instance together with the layers it spans and their three
/// kinds of quantizers.
struct QuadapterBlock {
  std::string name;
  FirstLayer first;
  std::optional<PiecewiseLinear> activation;
  std::vector<LinearLayer> consumers;

  QuantizerState first_weight_q;
  QuantizerState activation_q;
  std::vector<QuantizerState> consumer_weight_q;

  QuadapterParams params;

  std::size_t width() const { return first.width(); }
  /// Throws if widths disagree or a quantizer list is the wrong length.
  void validate() const;
};

/// Block with fresh dynamic quantizers at the given bit depth and alpha = 1.
QuadapterBlock make_block(std::string name, FirstLayer first, std::vector<LinearLayer> consumers, int bits,
                          std::optional<PiecewiseLinear> activation = std::nullopt);

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Graph handles for the producer; alpha is null when no adapter is applied.
struct FirstLayerVars {
  LayerKind kind = LayerKind::kLinear;
  Var weight;
  std::optional<Var> bias;
};

/// Q_a(Q_1(A W1) x + A b1), then the optional piecewise-linear map.
Var adapted_activation(Var x, const FirstLayerVars& first, const Var* alpha, QuantizerState& first_weight_q,
                       QuantizerState& activation_q, const std::optional<PiecewiseLinear>& activation,
                       const QuantRun& run, const std::string& name);

/// Q_2(W2 A^-1) a + b2. inv_alpha is reciprocal(alpha), or null.
Var adapted_consumer(Var a, Var weight, const std::optional<Var>& bias, const Var* inv_alpha,
                     QuantizerState& weight_q, const QuantRun& run, const std::string& name);

/// Output of every consumer of the block for inputs x (rows).
std::vector<Var> block_forward(Var x, QuadapterBlock& block, Var alpha, const QuantRun& run);
/// Convenience: evaluates with alpha as a constant.
std::vector<Tensor> block_forward(const Tensor& x, QuadapterBlock& block, QuantSwitch mode);

/// The two-layer reference without adapter or quantizers.
std::vector<Tensor> reference_forward(const Tensor& x, const QuadapterBlock& block);

// ---------------------------------------------------------------------------
// Folding
// ---------------------------------------------------------------------------

struct FoldedWeights {
  Tensor first_weight;
  Tensor first_bias;
  std::vector<Tensor> consumer_weights;
};

/// W1' = A W1, b1' = A b1, W2' = W2 A^-1 for every consumer.
FoldedWeights fold(const QuadapterBlock& block);
FoldedWeights fold(const FirstLayer& first, const std::vector<const Tensor*>& consumer_weights, const Tensor& alpha);

struct UnfoldedWeights {
  Tensor first_weight;
  Tensor first_bias;
  std::vector<Tensor> consumer_weights;
};

UnfoldedWeights unfold(const FoldedWeights& folded, const Tensor& alpha);

/// The block evaluated on folded weights with alpha removed.
std::vector<Tensor> folded_forward(const Tensor& x, QuadapterBlock& block, const FoldedWeights& folded,
                                   QuantSwitch mode);

}  // namespace quadapter
