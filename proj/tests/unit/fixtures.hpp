// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "quadapter/adapter.hpp"
#include "test_util.hpp"

namespace quadapter::testing {

/// A random block: linear or layer-norm first layer, one to three consumers,
/// optional relu / leaky relu in between, random positive alpha.
inline QuadapterBlock random_block(std::mt19937_64& rng, LayerKind kind, int bits = 8) {
  std::uniform_int_distribution<int> dim(2, 9), nc(1, 3), act(0, 2);
  const std::size_t d = dim(rng), k = dim(rng);
  FirstLayer first{kind, kind == LayerKind::kLinear ? random_normal({d, k}, rng) : random_tensor({d}, rng, 0.2, 2.0),
                   random_normal({d}, rng, 0.5)};
  std::vector<LinearLayer> cons;
  const int n = nc(rng);
  for (int c = 0; c < n; ++c) {
    const std::size_t out = dim(rng);
    cons.push_back({random_normal({out, d}, rng), c % 2 == 0 ? random_normal({out}, rng, 0.3) : Tensor{}});
  }
  std::optional<PiecewiseLinear> f;
  if (kind == LayerKind::kLinear) {
    const int a = act(rng);
    if (a == 1) f = PiecewiseLinear::relu();
    if (a == 2) f = PiecewiseLinear::leaky_relu(0.1);
  }
  QuadapterBlock b = make_block("blk", std::move(first), std::move(cons), bits, f);
  std::uniform_real_distribution<double> la(std::log(0.05), std::log(20.0));
  for (double& a : b.params.alpha.data()) a = std::exp(la(rng));
  return b;
}

/// Input rows for a block; layer-norm blocks get normalized rows.
inline Tensor random_input(const QuadapterBlock& b, std::size_t rows, std::mt19937_64& rng) {
  const std::size_t k = b.first.kind == LayerKind::kLinear ? b.first.weight.cols() : b.width();
  Tensor x = random_normal({rows, k}, rng);
  if (b.first.kind == LayerKind::kLayerNorm) {
    for (std::size_t r = 0; r < rows; ++r) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < k; ++c) m += x.at(r, c);
      m /= k;
      for (std::size_t c = 0; c < k; ++c) v += (x.at(r, c) - m) * (x.at(r, c) - m);
      const double inv = 1.0 / std::sqrt(v / k + 1e-5);
      for (std::size_t c = 0; c < k; ++c) x[r * k + c] = (x.at(r, c) - m) * inv;
    }
  }
  return x;
}

/// Unscaled two-layer output, written with plain loops.
inline std::vector<Tensor> plain_forward(const Tensor& x, const QuadapterBlock& b) {
  const std::size_t d = b.width(), n = x.rows();
  Tensor u({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0;
      if (b.first.kind == LayerKind::kLinear) {
        for (std::size_t j = 0; j < x.cols(); ++j) acc += b.first.weight.at(i, j) * x.at(r, j);
      } else {
        acc = b.first.weight[i] * x.at(r, i);
      }
      if (!b.first.bias.empty()) acc += b.first.bias[i];
      if (b.activation) acc = (*b.activation)(acc);
      u[r * d + i] = acc;
    }
  }
  std::vector<Tensor> outs;
  for (const LinearLayer& c : b.consumers) {
    Tensor y({n, c.out_features()});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t o = 0; o < c.out_features(); ++o) {
        double acc = c.has_bias() ? c.bias[o] : 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += c.weight.at(o, i) * u.at(r, i);
        y[r * c.out_features() + o] = acc;
      }
    }
    outs.push_back(std::move(y));
  }
  return outs;
}

inline double max_rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0, scale = 1e-300;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

}  // namespace quadapter::testing
