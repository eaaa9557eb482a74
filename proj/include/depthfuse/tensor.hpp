// ----------------------------------------------------------------------------
// Copyright 2026 The depthfuse Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// ----------------------------------------------------------------------------

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "depthfuse/error.hpp"

namespace depthfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

// Creation counter. Every node is stamped when it is produced, so parents
// always carry a smaller stamp than their consumers and sorting by stamp
// yields a topological order of the tape.
inline std::uint64_t next_stamp() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// While alive, ops on this thread record nothing on the tape. Used for
/// evaluation passes.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

/// One recorded value on the tape.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient"
  bool requires_grad = false;
  std::uint64_t stamp = detail::next_stamp();
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

/// Dense row-major float64 tensor with reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Values produced
/// by ops are never modified afterwards; only leaves (parameters) are written,
/// and only by the optimizer or a checkpoint load between steps.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
    }
    if (numel_of(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  /// Size of the last axis.
  std::size_t cols() const { return node_->shape.back(); }
  /// Product of all leading axes.
  std::size_t rows() const { return numel() / cols(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<double> grad() { return node_->grad; }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }
  void clear_grad() { node_->grad.clear(); }

  /// A new leaf holding a copy of the values, detached from the tape.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Runs reverse-mode accumulation from this scalar.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

/// Builds an op result. The backward closure is only retained when at least
/// one input is tracked, so graphs over frozen weights cost nothing extra.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::vector<std::shared_ptr<Node>> parents,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  const bool tracked = detail::grad_mode() && std::any_of(parents.begin(), parents.end(),
                                   [](const auto& p) { return p->requires_grad; });
  if (tracked) {
    Node& n = *out.node();
    n.requires_grad = true;
    n.parents = std::move(parents);
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::vector<Node*> stack{node_.get()};
  std::unordered_set<const Node*> seen{node_.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->stamp > b->stamp; });

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are scratch; only leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.clear();
  }
}

}  // namespace depthfuse
