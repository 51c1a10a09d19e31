// Copyright 2026 The Sepkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "sepkit/errors.hpp"
#include "sepkit/params.hpp"
#include "sepkit/rng.hpp"
#include "sepkit/tensor.hpp"

namespace sepkit {

// Handle to a node in a Graph. Plain value type; cheap to copy.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Operations append nodes during the forward pass; each
// node stores its value and a closure that scatters the node's gradient to
// its parents. backward() runs the closures in reverse insertion order,
// which is a valid topological order by construction.
//
// Gradients are allocated lazily: a node that never receives a contribution
// is skipped during the sweep, so subgraphs that do not feed the loss cost
// nothing on the way back.
template <typename S>
class Graph {
 public:
  // Called as back(graph, self) during the reverse sweep.
  using BackwardFn = std::function<void(Graph&, Var)>;

  // Deferred update of batch-norm running statistics, recorded during the
  // forward pass and applied by the trainer after the step.
  struct StatUpdate {
    Parameter<S>* running_mean;
    Parameter<S>* running_var;
    Tensor<S> mean;
    Tensor<S> var;
  };

  explicit Graph(bool training = false, Rng rng = Rng(0), bool grad_enabled = true)
      : training_(training), grad_enabled_(grad_enabled), rng_(rng) {}

  bool training() const { return training_; }
  bool grad_enabled() const { return grad_enabled_; }
  Rng& rng() { return rng_; }

  // Leaf with no gradient.
  Var constant(Tensor<S> value) {
    return push(std::move(value), false, nullptr, nullptr);
  }

  // Leaf whose gradient is wanted (finite-difference checks probe inputs).
  Var input(Tensor<S> value) {
    return push(std::move(value), grad_enabled_, nullptr, nullptr);
  }

  // Leaf bound to a model parameter. After backward() the node's gradient is
  // accumulated into the parameter's grad tensor.
  Var param(Parameter<S>& p) {
    return push(Tensor<S>(p.value), grad_enabled_ && p.trainable, nullptr, &p);
  }

  // Interior node. `parents` is consulted only for the needs_grad flag; the
  // backward closure is responsible for routing gradients.
  Var node(Tensor<S> value, std::initializer_list<Var> parents, BackwardFn back) {
    bool ng = false;
    if (grad_enabled_) {
      for (Var p : parents) ng = ng || (p.valid() && needs_grad(p));
    }
    return push(std::move(value), ng, ng ? std::move(back) : nullptr, nullptr);
  }

  Var node(Tensor<S> value, const std::vector<Var>& parents, BackwardFn back) {
    bool ng = false;
    if (grad_enabled_) {
      for (Var p : parents) ng = ng || (p.valid() && needs_grad(p));
    }
    return push(std::move(value), ng, ng ? std::move(back) : nullptr, nullptr);
  }

  const Tensor<S>& val(Var v) const { return nodes_[check(v)].value; }

  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

  // Gradient tensor of a node, allocated (zeroed) on first access. Call only
  // for nodes with needs_grad.
  Tensor<S>& grad(Var v) {
    Node& n = nodes_[check(v)];
    if (!n.grad_live) {
      n.grad = Tensor<S>::zeros(n.value.shape());
      n.grad_live = true;
    }
    return n.grad;
  }

  bool grad_live(Var v) const { return nodes_[check(v)].grad_live; }

  // Backpropagates from a scalar node. Parameter gradients accumulate into
  // their Parameter::grad tensors; leaf input gradients stay readable via
  // grad().
  void backward(Var root) {
    if (!grad_enabled_) throw Error("backward() on a graph built without gradients");
    Node& r = nodes_[check(root)];
    if (r.value.numel() != 1) throw ShapeError("backward() root must be scalar");
    if (!r.needs_grad) return;
    grad(root).fill(S(1));
    for (std::int64_t i = static_cast<std::int64_t>(root.id); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.grad_live) continue;
      if (n.back) n.back(*this, Var{static_cast<std::int32_t>(i)});
      if (n.bound && n.bound->trainable) {
        n.bound->grad.vec() += n.grad.vec();
      }
    }
  }

  std::vector<StatUpdate>& stat_updates() { return stat_updates_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    BackwardFn back;
    Parameter<S>* bound = nullptr;
    bool needs_grad = false;
    bool grad_live = false;
  };

  Var push(Tensor<S> value, bool needs_grad, BackwardFn back, Parameter<S>* bound) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    n.bound = bound;
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  std::size_t check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw Error("invalid graph handle");
    }
    return static_cast<std::size_t>(v.id);
  }

  std::deque<Node> nodes_;
  std::vector<StatUpdate> stat_updates_;
  bool training_;
  bool grad_enabled_;
  Rng rng_;
};

}  // namespace sepkit
