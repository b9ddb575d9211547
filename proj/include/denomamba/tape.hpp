#pragma once

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "denomamba/errors.hpp"
#include "denomamba/feature_map.hpp"

namespace denomamba {

/// A learnable array and its gradient buffer.
///
/// Gradients accumulate across backward passes until `zero_grad()`.
struct Parameter {
  std::string name;
  FeatureMap value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string param_name, Shape shape)
      : name(std::move(param_name)), value(shape), grad(shape.numel(), 0.0) {}

  std::size_t size() const { return value.numel(); }
  Shape shape() const { return value.shape(); }
  std::span<double> values() { return value.mutable_data(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Reverse-mode differentiation record.
///
/// Nodes are appended in execution order, which is a topological order of
/// the computation, so `backward` walks them once in reverse. A tape is
/// single-writer and must outlive every FeatureMap recorded on it.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Attach `value` to a new node whose backward rule is `fn`.
  FeatureMap record(FeatureMap value, BackwardFn fn) {
    nodes_.push_back(Node{value.numel(), std::move(fn), {}});
    value.tape_ = this;
    value.node_ = nodes_.size() - 1;
    return value;
  }

  /// Leaf node for a parameter; its gradient lands in `param.grad`.
  FeatureMap watch(Parameter& param) {
    Parameter* target = &param;
    return record(param.value.detached(), [target](Tape&, std::span<const double> g) {
      for (std::size_t i = 0; i < g.size(); ++i) target->grad[i] += g[i];
    });
  }

  /// Gradient buffer of `x`, or an empty span if `x` is not on this tape.
  std::span<double> grad_of(const FeatureMap& x) {
    if (x.tape() != this) return {};
    Node& node = nodes_[x.node()];
    if (node.grad.empty()) node.grad.assign(node.numel, 0.0);
    return node.grad;
  }

  /// Propagate d(loss)/d(.) to every recorded node and watched parameter.
  void backward(const FeatureMap& loss) {
    if (loss.tape() != this) throw UsageError("backward: loss was not recorded on this tape");
    if (loss.numel() != 1) {
      throw UsageError("backward: loss must be a scalar, got shape " + loss.shape().str());
    }
    for (auto& node : nodes_) node.grad.clear();
    grad_of(loss)[0] = corrupt_backward_ ? 1.5 : 1.0;
    for (std::size_t id = loss.node() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.grad.empty() || !node.fn) continue;
      // The rule may grow other nodes' buffers but never this one.
      std::vector<double> g = std::move(node.grad);
      node.fn(*this, g);
      node.grad = std::move(g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Forget every node. Maps recorded earlier must not be used afterwards.
  void clear() { nodes_.clear(); }

  /// Test hook: scales the seed gradient so every backward result is wrong.
  void set_corrupt_backward(bool on) { corrupt_backward_ = on; }

 private:
  struct Node {
    std::size_t numel = 0;
    BackwardFn fn;
    std::vector<double> grad;
  };

  std::vector<Node> nodes_;
  bool corrupt_backward_ = false;
};

/// Tape shared by the tracked operands, or nullptr if none is tracked.
inline Tape* common_tape(std::initializer_list<const FeatureMap*> operands) {
  Tape* tape = nullptr;
  for (const FeatureMap* x : operands) {
    if (x == nullptr || !x->tracked()) continue;
    if (tape != nullptr && tape != x->tape()) {
      throw UsageError("operands are recorded on different tapes");
    }
    tape = x->tape();
  }
  return tape;
}

/// Parameter value, watched on `tape` when one is given.
inline FeatureMap use(Tape* tape, Parameter& param) {
  return tape != nullptr ? tape->watch(param) : param.value.detached();
}

}  // namespace denomamba
