// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/adam.hpp"

#include <cmath>

#include "quadapter/error.hpp"

namespace quadapter {

AdamState AdamState::for_shape(const Shape& shape, AdamConfig config) {
  return AdamState{Tensor(shape, 0.0), Tensor(shape, 0.0), 0, config};
}

void adam_step(Tensor& param, const Tensor& grad, AdamState& state, double lr) {
  require(param.shape() == grad.shape() && param.shape() == state.m.shape() && param.shape() == state.v.shape(),
          ErrorKind::kDimension, "adam_step shape mismatch for " + shape_string(param.shape()));
  require(lr >= 0.0, ErrorKind::kContract, "learning rate must be non-negative");
  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

}  // namespace quadapter
