// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "quadapter/tensor.hpp"

namespace quadapter {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// What an op's backward closure sees: the upstream gradient, the saved
/// forward values, and a gradient buffer per input (null when that input does
/// not need one).
struct BackwardArgs {
  const Graph& graph;
  const Tensor& grad_out;
  const Tensor& out;
  std::span<const std::size_t> inputs;
  std::span<Tensor* const> grad_in;

  const Tensor& input(std::size_t k) const;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Define-by-run tape. Nodes are append-only so inputs always precede their
/// consumers; one backward() call fills the gradient of every reachable
/// requires_grad node.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = false, std::string name = {});
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op result. The value is checked for NaN/Inf here.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() with respect to v; zeros if unreached.
  Tensor grad(Var v) const;

  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "leaf";
    std::string name;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

}  // namespace quadapter
