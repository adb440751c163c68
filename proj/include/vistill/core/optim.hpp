#pragma once

#include <cmath>
#include <vector>

#include "vistill/core/tensor.hpp"

namespace vistill {

template <class T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

/// Bias-corrected Adam. Holds first/second moment buffers per parameter;
/// step() applies the update and zeroes gradients.
template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig<T> cfg = {}) : cfg_(cfg) {
    for (auto& p : params) slots_.push_back({p, std::vector<T>(p->data.size(), T(0)), std::vector<T>(p->data.size(), T(0))});
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
    for (auto& s : slots_) {
      if (!s.p->has_grad())
        throw ContractError("adam_step: parameter " + dims_str(s.p->shape) + " has no gradient");
      const int64_t n = s.p->size();
      for (int64_t i = 0; i < n; ++i) {
        const T gv = s.p->grad[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (T(1) - cfg_.beta1) * gv;
        s.v[i] = cfg_.beta2 * s.v[i] + (T(1) - cfg_.beta2) * gv * gv;
        const T mhat = s.m[i] / static_cast<T>(bc1);
        const T vhat = s.v[i] / static_cast<T>(bc2);
        s.p->data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
      s.p->finite_verified = false;  // data changed; rescan
      check_finite(*s.p, "adam_step");
      s.p->zero_grad();
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.p->zero_grad();
  }

  int64_t step_count() const { return t_; }
  const AdamConfig<T>& config() const { return cfg_; }
  void set_lr(T lr) { cfg_.lr = lr; }

 private:
  struct Slot {
    Var<T> p;
    std::vector<T> m, v;
  };
  std::vector<Slot> slots_;
  AdamConfig<T> cfg_;
  int64_t t_ = 0;
};

}  // namespace vistill
