#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vistill/core/kernels.hpp"

namespace vistill {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& m) : std::runtime_error("training error: " + m) {}
};

using Dims = std::vector<int64_t>;

inline int64_t numel(const Dims& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string dims_str(const Dims& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

/// Dense n-d array with optional gradient buffer. Gradient storage is lazy:
/// it is only ever allocated when backward() reaches this tensor, so a frozen
/// model can be checked for "no grad was ever allocated".
template <class T>
struct Tensor {
  Dims shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  // set once a finite scan has passed; ops skip rescanning verified inputs.
  // Anything mutating `data` outside the op layer must clear it.
  mutable bool finite_verified = false;

  Tensor() = default;
  Tensor(Dims s, bool rg) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), T(0)), requires_grad(rg) {}
  Tensor(Dims s, std::vector<T> d, bool rg) : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + dims_str(shape));
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
  }
  bool has_grad() const { return !grad.empty(); }
};

template <class T>
using Var = std::shared_ptr<Tensor<T>>;

template <class T>
Var<T> make_var(Dims shape, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(shape), requires_grad);
}

template <class T>
Var<T> make_var(Dims shape, std::vector<T> data, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(shape), std::move(data), requires_grad);
}

template <class T>
Var<T> scalar_var(T v) {
  return make_var<T>({1}, std::vector<T>{v});
}

template <class T>
void check_finite(const Tensor<T>& t, const char* where) {
  if (t.finite_verified) return;
  if (!kern::all_finite(t.data.data(), t.data.size()))
    throw NumericError(std::string(where) + ": tensor " + dims_str(t.shape) + " contains NaN/Inf");
  t.finite_verified = true;
}

// Detached copy: same values, no gradient connectivity.
template <class T>
Var<T> detach(const Var<T>& v) {
  auto out = make_var<T>(v->shape, v->data, false);
  return out;
}

}  // namespace vistill
