// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/quant.hpp"

#include <algorithm>
#include <cmath>

#include "quadapter/error.hpp"

namespace quadapter {

std::string_view to_string(QuantMode mode) {
  switch (mode) {
    case QuantMode::kDynamic: return "dynamic";
    case QuantMode::kStatic: return "static";
    case QuantMode::kLearned: return "learned";
  }
  return "dynamic";
}

QuantMode parse_quant_mode(std::string_view name) {
  if (name == "dynamic") return QuantMode::kDynamic;
  if (name == "static") return QuantMode::kStatic;
  if (name == "learned") return QuantMode::kLearned;
  fail(ErrorKind::kConfig, "unknown quantizer mode '" + std::string(name) + "'");
}

QuantizerState make_quantizer(int bits, QuantMode mode) {
  require(bits >= 2 && bits <= 30, ErrorKind::kContract, "bit depth must lie in [2, 30]");
  QuantizerState q;
  q.bits = bits;
  q.mode = mode;
  return q;
}

ScaleOffset derive_scale_offset(const QuantizerState& q) {
  if (!(q.theta_max > q.theta_min)) {
    fail(ErrorKind::kDegenerateRange, "quantizer range [" + std::to_string(q.theta_min) + ", " +
                                          std::to_string(q.theta_max) + "] is empty");
  }
  const std::int64_t n = q.levels();
  ScaleOffset so;
  so.scale = (q.theta_max - q.theta_min) / static_cast<double>(n);
  const double o = std::nearbyint(-q.theta_min / so.scale);
  so.offset = static_cast<std::int64_t>(std::clamp(o, 0.0, static_cast<double>(n)));
  return so;
}

double quantize_value(double x, const ScaleOffset& so, std::int64_t levels) {
  const double o = static_cast<double>(so.offset);
  const double k = std::clamp(std::nearbyint(x / so.scale + o), 0.0, static_cast<double>(levels));
  // integer grid index keeps -0 out of the result
  return so.scale * static_cast<double>(static_cast<std::int64_t>(k) - so.offset);
}

namespace {

void check_finite_input(const Tensor& x) {
  require(x.all_finite(), ErrorKind::kNonFinite, "quantizer input holds NaN/Inf");
}

}  // namespace

Tensor fake_quantize(const Tensor& x, QuantizerState& q) {
  check_finite_input(x);
  if (q.mode == QuantMode::kDynamic) observe_range(q, x);
  const ScaleOffset so = derive_scale_offset(q);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize_value(x[i], so, q.levels());
  return out;
}

void observe_range(QuantizerState& q, const Tensor& x) {
  require(q.mode != QuantMode::kLearned, ErrorKind::kContract, "observe_range on a learned quantizer");
  check_finite_input(x);
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  double mn = *lo, mx = *hi;
  if (q.mode == QuantMode::kStatic && q.observed) {
    mn = std::min(mn, q.theta_min);
    mx = std::max(mx, q.theta_max);
  }
  q.theta_min = std::min(mn, 0.0);
  q.theta_max = std::max(mx, 0.0);
  q.observed = true;
}

void assign_learned_range(QuantizerState& q, double theta_min, double theta_max) {
  theta_min = std::min(theta_min, 0.0);
  theta_max = std::max(theta_max, 0.0);
  constexpr double kMinWidth = 1e-8;
  if (theta_max - theta_min < kMinWidth) theta_max = theta_min + kMinWidth;
  q.theta_min = theta_min;
  q.theta_max = theta_max;
}

FakeQuantGrad fake_quantize_backward(const Tensor& x, const QuantizerState& q, const Tensor& upstream) {
  require(x.shape() == upstream.shape(), ErrorKind::kDimension, "upstream gradient shape mismatch");
  FakeQuantGrad g{Tensor(x.shape(), 0.0), 0.0, 0.0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < q.theta_min) {
      g.dtheta_min += upstream[i];
    } else if (x[i] > q.theta_max) {
      g.dtheta_max += upstream[i];
    } else {
      g.dx[i] = upstream[i];
    }
  }
  if (!q.trainable()) g.dtheta_min = g.dtheta_max = 0.0;
  return g;
}

Var fake_quantize(Var x, Var theta, int bits, QuantForward forward, RangeGradient range) {
  require(x.graph == theta.graph && x.graph != nullptr, ErrorKind::kContract, "fake_quantize operands in different graphs");
  const Tensor& tv = theta.value();
  require(tv.size() == 2, ErrorKind::kDimension, "theta must hold (min, max)");
  QuantizerState q;
  q.bits = bits;
  q.theta_min = tv[0];
  q.theta_max = tv[1];
  const ScaleOffset so = derive_scale_offset(q);
  const Tensor& xv = x.value();
  check_finite_input(xv);
  Tensor out(xv.shape());
  if (forward == QuantForward::kQuantize) {
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = quantize_value(xv[i], so, q.levels());
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::clamp(xv[i], q.theta_min, q.theta_max);
  }
  // Only the quantizing forward has a scale to differentiate.
  const bool full = range == RangeGradient::kFull && forward == QuantForward::kQuantize;
  return x.graph->record("fake_quantize", std::move(out), {x.id, theta.id}, [full, so, n = q.levels()](const BackwardArgs& g) {
    const Tensor& xv = g.input(0);
    const Tensor& tv = g.input(1);
    const double lo = tv[0], hi = tv[1];
    double dlo = 0.0, dhi = 0.0;
    // Full rule: Q = s (k - o) with s = (hi - lo) / n, o = round(-lo / s),
    // k = clip(round(x / s + o)) and d round = 1.
    const double nn = static_cast<double>(n), s = so.scale, o = static_cast<double>(so.offset);
    const double shift = -lo / s - o;  // grid shift of the offset
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double go = g.grad_out[i];
      if (xv[i] >= lo && xv[i] <= hi && g.grad_in[0]) (*g.grad_in[0])[i] += go;
      if (!full) {
        if (xv[i] < lo) dlo += go;
        if (xv[i] > hi) dhi += go;
        continue;
      }
      // The grid edges sit up to half a step inside theta, so saturation is
      // read off the unrounded index here.
      const double v = xv[i] / s + o;
      if (v < 0.0) {
        dlo += go * (1.0 - shift / nn);
        dhi += go * shift / nn;
      } else if (v > nn) {
        dhi += go * (1.0 + shift / nn);
        dlo -= go * shift / nn;
      } else {
        const double ds = (g.out[i] - xv[i]) / s;
        dhi += go * ds / nn;
        dlo -= go * ds / nn;
      }
    }
    if (Tensor* dt = g.grad_in[1]) {
      (*dt)[0] += dlo;
      (*dt)[1] += dhi;
    }
  });
}

Var batch_range(Var x) {
  const Tensor& xv = x.value();
  check_finite_input(xv);
  // min_element and max_element both keep the first of equal extremes.
  const auto lo = std::min_element(xv.data().begin(), xv.data().end());
  const auto hi = std::max_element(xv.data().begin(), xv.data().end());
  const std::size_t ilo = static_cast<std::size_t>(lo - xv.data().begin());
  const std::size_t ihi = static_cast<std::size_t>(hi - xv.data().begin());
  const double mn = std::min(*lo, 0.0), mx = std::max(*hi, 0.0);
  return x.graph->record("batch_range", Tensor::vector({mn, mx}), {x.id}, [ilo, ihi](const BackwardArgs& g) {
    Tensor* dx = g.grad_in[0];
    if (!dx) return;
    const Tensor& xv = g.input(0);
    // A clamped bound is the constant zero and passes nothing back.
    if (xv[ilo] < 0.0) (*dx)[ilo] += g.grad_out[0];
    if (xv[ihi] > 0.0) (*dx)[ihi] += g.grad_out[1];
  });
}

Var quantize_site(Var x, QuantizerState& q, const QuantRun& run, const std::string& name) {
  if (run.probe && *run.probe) (*run.probe)(name, x.value());
  switch (run.mode) {
    case QuantSwitch::kOff:
      return x;
    case QuantSwitch::kObserve:
      if (q.mode != QuantMode::kLearned) observe_range(q, x.value());
      return x;
    case QuantSwitch::kOn:
    case QuantSwitch::kSurrogate:
      break;
  }
  const QuantForward fwd = run.mode == QuantSwitch::kSurrogate ? QuantForward::kSurrogate : QuantForward::kQuantize;
  if (q.mode == QuantMode::kDynamic) {
    observe_range(q, x.value());
    if (run.differentiable_ranges) return fake_quantize(x, batch_range(x), q.bits, fwd, RangeGradient::kFull);
  }
  require(q.observed, ErrorKind::kContract, "quantizer '" + name + "' used before its range was initialized");
  const bool learn = run.train_theta && q.trainable();
  Var theta = x.graph->leaf(Tensor::vector({q.theta_min, q.theta_max}), learn, name);
  if (learn && run.theta_leaves) {
    require(!run.theta_leaves->contains(name), ErrorKind::kContract, "quantizer '" + name + "' applied twice in one pass");
    run.theta_leaves->emplace(name, theta);
  }
  return fake_quantize(x, theta, q.bits, fwd);
}

}  // namespace quadapter
