#pragma once

// Central finite-difference verification of every op's analytic gradient.
// Runs in double precision regardless of the training scalar type. Inputs
// are sampled away from non-differentiable points (relu kinks).

#include <functional>
#include <string>
#include <vector>

#include "vistill/core/dispatch.hpp"
#include "vistill/core/rng.hpp"

namespace vistill {

struct GradCheckReport {
  std::string op;
  int trials = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};

namespace detail {

struct GradCase {
  std::vector<Var<double>> inputs;  // all marked requires_grad
  OpAttrs attrs;
};

inline Var<double> rand_input(RngStream& rng, Dims shape, double lo = -1.0, double hi = 1.0,
                              double exclusion = 0.0) {
  auto v = make_var<double>(std::move(shape), true);
  for (auto& x : v->data) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::abs(x) < exclusion);
  }
  return v;
}

inline GradCase make_grad_case(const std::string& kind, RngStream& rng, int trial) {
  GradCase c;
  if (kind == "matmul") {
    c.inputs = {rand_input(rng, {3, 4}), rand_input(rng, {4, 5})};
  } else if (kind == "conv2d") {
    c.attrs.stride = (trial % 2) + 1;
    c.attrs.pad = trial % 2;
    c.inputs = {rand_input(rng, {2, 3, 6, 6}), rand_input(rng, {4, 3, 3, 3})};
  } else if (kind == "add") {
    switch (trial % 3) {
      case 0: c.inputs = {rand_input(rng, {3, 4}), rand_input(rng, {3, 4})}; break;
      case 1: c.inputs = {rand_input(rng, {2, 3, 4, 4}), rand_input(rng, {3})}; break;  // channel bias
      default: c.inputs = {rand_input(rng, {3, 4}), rand_input(rng, {4})}; break;       // row bias
    }
  } else if (kind == "mul") {
    if (trial % 2 == 0)
      c.inputs = {rand_input(rng, {3, 4}), rand_input(rng, {3, 4})};
    else
      c.inputs = {rand_input(rng, {3, 4}), rand_input(rng, {1})};  // scalar broadcast
  } else if (kind == "relu") {
    c.inputs = {rand_input(rng, {3, 4}, -1.0, 1.0, 0.1)};  // keep clear of the kink at 0
  } else if (kind == "gelu") {
    c.inputs = {rand_input(rng, {3, 4}, -2.0, 2.0)};
  } else if (kind == "softmax") {
    c.inputs = {rand_input(rng, {3, 5}, -2.0, 2.0)};
  } else if (kind == "layer_norm") {
    c.inputs = {rand_input(rng, {4, 6}), rand_input(rng, {6}, 0.5, 1.5), rand_input(rng, {6})};
  } else if (kind == "group_norm") {
    c.attrs.groups = 2;
    c.inputs = {rand_input(rng, {2, 4, 3, 3}), rand_input(rng, {4}, 0.5, 1.5), rand_input(rng, {4})};
  } else if (kind == "mean" || kind == "sum") {
    c.inputs = {rand_input(rng, {3, 4})};
  } else if (kind == "reshape") {
    c.attrs.shape = {2, 6};
    c.inputs = {rand_input(rng, {3, 4})};
  } else if (kind == "transpose") {
    c.attrs.perm = {2, 0, 1};
    c.inputs = {rand_input(rng, {2, 3, 4})};
  } else if (kind == "concat") {
    c.attrs.axis = trial % 2;
    c.inputs = {rand_input(rng, {2, 3}), rand_input(rng, {2, 3})};
  } else if (kind == "slice") {
    c.attrs.axis = 1;
    c.attrs.begin = 1;
    c.attrs.end = 4;
    c.inputs = {rand_input(rng, {3, 6})};
  } else if (kind == "avg_pool2d") {
    c.attrs.kh = c.attrs.kw = 2;
    c.inputs = {rand_input(rng, {2, 3, 4, 4})};
  } else if (kind == "scaled_dot_product_attention") {
    c.inputs = {rand_input(rng, {2, 2, 3, 4}), rand_input(rng, {2, 2, 3, 4}), rand_input(rng, {2, 2, 3, 4})};
  } else if (kind == "embedding_lookup") {
    c.attrs.indices = {0, 2, 2, 4};  // repeated index exercises accumulation
    c.inputs = {rand_input(rng, {5, 3})};
  } else {
    throw ShapeError("gradcheck: unsupported kind '" + kind + "'");
  }
  return c;
}

}  // namespace detail

/// Checks d(loss)/d(input) for one op kind against central differences,
/// where loss = sum(op(inputs) * R) for a fixed random projection R.
inline GradCheckReport check_gradients(const std::string& kind, int trials, double h, double tol,
                                       uint64_t seed = 20240001ull) {
  GradCheckReport rep;
  rep.op = kind;
  rep.trials = trials;
  RngStream rng(derive_seed(seed, kind));
  for (int t = 0; t < trials; ++t) {
    auto c = detail::make_grad_case(kind, rng, t);
    // fixed projection so the scalar loss exercises every output element
    Graph<double> probe;
    probe.set_grad_enabled(false);
    auto y0 = forward_op(probe, kind, c.inputs, c.attrs);
    auto r = make_var<double>(y0->shape);
    for (auto& v : r->data) v = rng.uniform(-1.0, 1.0);

    auto loss_value = [&]() {
      Graph<double> g;
      g.set_grad_enabled(false);
      auto y = forward_op(g, kind, c.inputs, c.attrs);
      auto l = sum_all(g, mul(g, y, r));
      return l->data[0];
    };

    // analytic pass
    Graph<double> g;
    auto y = forward_op(g, kind, c.inputs, c.attrs);
    auto l = sum_all(g, mul(g, y, r));
    g.backward(l);

    for (auto& inp : c.inputs) {
      for (size_t i = 0; i < inp->data.size(); ++i) {
        const double orig = inp->data[i];
        inp->data[i] = orig + h;
        const double lp = loss_value();
        inp->data[i] = orig - h;
        const double lm = loss_value();
        inp->data[i] = orig;
        const double numeric = (lp - lm) / (2.0 * h);
        const double analytic = inp->has_grad() ? inp->grad[i] : 0.0;
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4});
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
      }
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

/// Runs check_gradients over every supported op kind.
inline std::vector<GradCheckReport> check_all_gradients(int trials = 10, double h = 1e-4, double tol = 1e-3) {
  std::vector<GradCheckReport> out;
  for (const auto& kind : op_kinds()) out.push_back(check_gradients(kind, trials, h, tol));
  return out;
}

}  // namespace vistill
