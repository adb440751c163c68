#pragma once

#include <functional>
#include <vector>

#include "vistill/core/tensor.hpp"

namespace vistill {

/// Computation tape. Ops append one backward closure per executed operation,
/// so the record is in topological (execution) order; backward() replays it
/// exactly once in reverse. One Graph per model instance / training step;
/// graphs share no state and may live on different threads.
template <class T>
class Graph {
 public:
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  bool finite_checks() const { return finite_checks_; }
  void set_finite_checks(bool on) { finite_checks_ = on; }

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  size_t num_nodes() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Gradients accumulate additively into
  /// every requires_grad tensor reachable from the loss. Clears the tape.
  void backward(const Var<T>& loss) {
    if (loss->size() != 1) throw ContractError("backward requires a scalar loss, got " + dims_str(loss->shape));
    if (nodes_.empty()) throw ContractError("backward on an empty tape");
    loss->ensure_grad();
    loss->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool grad_enabled_ = true;
  bool finite_checks_ = true;
};

/// RAII guard: disables taping within a scope (inference / frozen teacher).
template <class T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph<T>& g) : g_(g), prev_(g.grad_enabled()) { g_.set_grad_enabled(false); }
  ~NoGradGuard() { g_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph<T>& g_;
  bool prev_;
};

}  // namespace vistill
