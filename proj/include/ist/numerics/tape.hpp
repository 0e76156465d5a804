// SPDX-License-Identifier: Apache-2.0
#pragma once

// Define-by-run reverse-mode autodiff. A Tape is built fresh for every
// forward pass; the ParamScope handed to it decides which parameter leaves
// require gradients. Operations whose inputs are all constants are evaluated
// but not recorded, so coverage (and stored backward work) follows the scope.

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ist/error.hpp"
#include "ist/numerics/params.hpp"
#include "ist/numerics/tensor.hpp"

namespace ist {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;  // parameter leaves alias the store
    Tensor grad;  // empty until something flows in
    bool requires_grad = false;
    BackwardFn backward;
    std::string op;
    std::string label;
    std::optional<ParamKey> param;
  };

  explicit Tape(ParamScope scope = {}) : scope_(std::move(scope)) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const ParamScope& scope() const noexcept { return scope_; }

  /// Input tensor that never receives a gradient.
  Var constant(Tensor value) {
    return push(std::move(value), "constant", false, {});
  }

  /// Parameter leaf. Requires grad iff the key is inside the scope.
  Var param(const ParamStore& store, std::size_t index) {
    const ParamKey key{&store, index};
    const bool in_scope = scope_.contains(key);
    const Tensor& w = store[index].value;
    if (!w.all_finite()) {
      throw NumericError("non-finite parameter '" + store[index].name + "'");
    }
    nodes_.push_back({Tensor(), &w, Tensor(), in_scope, nullptr, "param", label_, std::nullopt});
    Var v{this, nodes_.size() - 1};
    if (in_scope) {
      nodes_[v.id].param = key;
      ++param_leaves_;
    }
    return v;
  }

  /// Records an op result. If no input requires grad the node is a constant
  /// and `backward` is dropped.
  Var record(Tensor value, std::string op, std::initializer_list<Var> inputs,
             BackwardFn backward) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    if (!needs) backward = nullptr;
    return push(std::move(value), std::move(op), needs, std::move(backward));
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }

  /// Adds `g` into the gradient accumulator of `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    const Tensor& nv = n.ref ? *n.ref : n.value;
    if (g.shape() != nv.shape()) {
      throw ShapeError("gradient shape " + shape_string(g.shape()) +
                       " does not match value shape " + shape_string(nv.shape()) +
                       " in op '" + n.op + "'");
    }
    if (!g.all_finite()) {
      throw NumericError("non-finite gradient flowing into op '" + n.op + "'" +
                         (n.label.empty() ? std::string{} : " at " + n.label));
    }
    if (n.grad.empty() && !nv.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Reverse sweep from a scalar loss. Returns gradients for every in-scope
  /// parameter leaf (zero if the loss did not depend on it), nothing else.
  GradMap backward(Var loss) {
    if (consumed_) throw UsageError("tape already consumed by backward()");
    if (loss.tape != this) throw UsageError("loss was not produced by this tape");
    if (value(loss.id).size() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       shape_string(value(loss.id).shape()));
    }
    consumed_ = true;
    visit_order_.clear();
    GradMap grads;
    if (nodes_[loss.id].requires_grad) {
      nodes_[loss.id].grad = Tensor(value(loss.id).shape(), 1.0);
      for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.backward || n.grad.empty()) continue;
        visit_order_.push_back(id);
        n.backward(*this, id);
      }
    }
    for (Node& n : nodes_) {
      if (!n.param) continue;
      Tensor g = n.grad.empty() ? Tensor(n.ref->shape(), 0.0) : std::move(n.grad);
      auto it = grads.find(*n.param);
      if (it == grads.end()) {
        grads.emplace(*n.param, std::move(g));
      } else {
        // Same parameter used twice in one forward.
        auto dst = it->second.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
    // Free stored activations; the tape is single-use.
    for (Node& n : nodes_) {
      n.backward = nullptr;
      n.grad = Tensor();
    }
    return grads;
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t param_leaves() const noexcept { return param_leaves_; }

  /// Number of ops that carry a backward rule.
  std::size_t recorded_ops() const noexcept { return recorded_; }

  /// Node ids in the order the last backward() visited them.
  const std::vector<std::size_t>& visit_order() const noexcept { return visit_order_; }

  /// Doubles held by recorded (gradient-carrying) nodes; the activation
  /// footprint a backward pass needs.
  std::size_t recorded_value_scalars() const noexcept { return recorded_scalars_; }

  /// Scoped label attached to nodes for error reports, e.g. "layer3.attn".
  class Label {
   public:
    Label(Tape& tape, std::string label) : tape_(tape), saved_(tape.label_) {
      tape_.label_ = std::move(label);
    }
    ~Label() { tape_.label_ = std::move(saved_); }
    Label(const Label&) = delete;
    Label& operator=(const Label&) = delete;

   private:
    Tape& tape_;
    std::string saved_;
  };

 private:
  Var push(Tensor value, std::string op, bool requires_grad, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by op '" + op + "'" +
                         (label_.empty() ? std::string{} : " at " + label_));
    }
    if (backward) {
      ++recorded_;
      recorded_scalars_ += value.size();
    }
    nodes_.push_back({std::move(value), nullptr, Tensor(), requires_grad, std::move(backward),
                      std::move(op), label_, std::nullopt});
    return Var{this, nodes_.size() - 1};
  }

  ParamScope scope_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  std::string label_;
  std::size_t recorded_ = 0;
  std::size_t recorded_scalars_ = 0;
  std::size_t param_leaves_ = 0;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

}  // namespace ist
