// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "quadapter/autodiff.hpp"
#include "quadapter/tensor.hpp"

namespace quadapter {

/// How a quantizer obtains its range: per batch, fixed from calibration data,
/// or trained by gradient descent.
enum class QuantMode { kDynamic, kStatic, kLearned };

std::string_view to_string(QuantMode mode);
QuantMode parse_quant_mode(std::string_view name);

struct ScaleOffset {
  double scale = 1.0;
  std::int64_t offset = 0;
};

/// Uniform asymmetric per-tensor quantizer parameters. The range always
/// contains zero once observed.
struct QuantizerState {
  double theta_min = 0.0;
  double theta_max = 0.0;
  int bits = 8;
  QuantMode mode = QuantMode::kDynamic;
  bool observed = false;

  bool trainable() const noexcept { return mode == QuantMode::kLearned; }
  std::int64_t levels() const noexcept { return (std::int64_t{1} << bits) - 1; }
};

QuantizerState make_quantizer(int bits, QuantMode mode = QuantMode::kDynamic);

/// s = (max - min) / (2^b - 1), o = round(-min / s) clamped to the grid.
ScaleOffset derive_scale_offset(const QuantizerState& q);

/// s * (clip(round(x / s + o), 0, 2^b - 1) - o), rounding half to even.
double quantize_value(double x, const ScaleOffset& so, std::int64_t levels);

/// Tensor-level fake quantization; a dynamic quantizer first refreshes its
/// range from x.
Tensor fake_quantize(const Tensor& x, QuantizerState& q);

/// Dynamic: replace the range with the zero-included min/max of x. Static:
/// widen the running range. Learned quantizers refuse.
void observe_range(QuantizerState& q, const Tensor& x);

/// Sets a trained range, restoring zero inclusion and a positive width.
void assign_learned_range(QuantizerState& q, double theta_min, double theta_max);

struct FakeQuantGrad {
  Tensor dx;
  double dtheta_min = 0.0;
  double dtheta_max = 0.0;
};

/// Straight-through estimate: identity inside [min, max], clipped elements
/// route their upstream gradient to the bound they hit. Range gradients are
/// only produced for learned quantizers.
FakeQuantGrad fake_quantize_backward(const Tensor& x, const QuantizerState& q, const Tensor& upstream);

/// kSurrogate evaluates clip(x, min, max), the function whose exact gradient
/// the straight-through backward is. Used for gradient checks.
enum class QuantForward { kQuantize, kSurrogate };

/// Graph op; theta is a [2] tensor (min, max).
// kClipped sends range gradient only from clipped elements. kFull also
// differentiates the scale seen by in-range elements (rounding alone is
// treated as identity), which is what lets batch statistics steer alpha.
enum class RangeGradient { kClipped, kFull };

Var fake_quantize(Var x, Var theta, int bits, QuantForward forward = QuantForward::kQuantize,
                  RangeGradient range = RangeGradient::kClipped);

// (min(0, min x), max(0, max x)) on the tape; gradient goes to the extreme
// element (first one on ties).
Var batch_range(Var x);

/// What quantizer sites do during one forward pass.
enum class QuantSwitch {
  kOff,        // identity
  kOn,         // fake quantization
  kSurrogate,  // clip only, see QuantForward
  kObserve,    // record ranges, pass values through
};

struct QuantRun {
  QuantSwitch mode = QuantSwitch::kOn;
  bool train_theta = false;
  // Learned-range leaves created during the pass, keyed by site name.
  std::map<std::string, Var>* theta_leaves = nullptr;
  // Sees every site input before quantization, in any mode.
  const std::function<void(const std::string&, const Tensor&)>* probe = nullptr;
  // Dynamic quantizers take their range from the tape instead of a constant.
  bool differentiable_ranges = false;
};

/// Applies quantizer q to x according to run. Mutates q for dynamic refresh
/// and observation.
Var quantize_site(Var x, QuantizerState& q, const QuantRun& run, const std::string& name);

}  // namespace quadapter
