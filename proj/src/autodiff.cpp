// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/autodiff.hpp"

#include "quadapter/error.hpp"

namespace quadapter {

const Tensor& Var::value() const {
  require(graph != nullptr, ErrorKind::kContract, "unbound Var");
  return graph->value(*this);
}

const Tensor& BackwardArgs::input(std::size_t k) const { return graph.value(inputs[k]); }

Var Graph::leaf(Tensor value, bool requires_grad, std::string name) {
  require(value.all_finite(), ErrorKind::kNonFinite, "leaf '" + name + "' holds NaN/Inf");
  Node node;
  node.name = std::move(name);
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite()) fail(ErrorKind::kNonFinite, std::string("op '") + op + "' produced NaN/Inf");
  Node node;
  node.op = op;
  node.value = std::move(value);
  for (std::size_t in : inputs) {
    require(in < nodes_.size(), ErrorKind::kContract, "op input refers to a future node");
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  require(loss.graph == this, ErrorKind::kContract, "loss belongs to another graph");
  Node& root = nodes_.at(loss.id);
  require(root.value.size() == 1, ErrorKind::kContract,
          "backward needs a scalar loss, got " + shape_string(root.value.shape()));
  for (Node& n : nodes_) n.grad = Tensor();
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);

  std::vector<Tensor*> grad_in;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    grad_in.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      Node& in = nodes_[n.inputs[k]];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad = Tensor(in.value.shape(), 0.0);
      grad_in[k] = &in.grad;
    }
    n.backward(BackwardArgs{*this, n.grad, n.value, n.inputs, grad_in});
    // Interior gradients are no longer needed once propagated.
    if (!n.inputs.empty()) n.grad = Tensor();
  }
}

}  // namespace quadapter
