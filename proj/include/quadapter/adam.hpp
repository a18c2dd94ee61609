// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "quadapter/tensor.hpp"

namespace quadapter {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments for one parameter tensor.
struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t step = 0;
  AdamConfig config;

  static AdamState for_shape(const Shape& shape, AdamConfig config = {});
};

/// One bias-corrected Adam update of param in place.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state, double lr);

}  // namespace quadapter
