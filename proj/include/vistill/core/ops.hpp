#pragma once

// Differentiable operators. Every op:
//   - validates input shapes (ShapeError) and finiteness (NumericError),
//   - computes its output with a fixed summation order (see kernels.hpp),
//   - when taping is enabled and any input requires grad, marks the output
//     requires_grad and records one backward closure on the graph.
// Backward closures accumulate additively (+=) so a parameter used twice
// receives the sum of both path gradients.

#include <algorithm>
#include <cmath>
#include <initializer_list>

#include "vistill/core/graph.hpp"
#include "vistill/core/tensor.hpp"

namespace vistill {

namespace detail {

template <class T>
void op_inputs(Graph<T>& g, const char* name, std::initializer_list<const Tensor<T>*> xs) {
  if (!g.finite_checks()) return;
  for (const Tensor<T>* x : xs) {
    if (x->finite_verified) continue;
    if (!kern::all_finite(x->data.data(), x->data.size()))
      throw NumericError(std::string(name) + ": non-finite input " + dims_str(x->shape));
    x->finite_verified = true;
  }
}

template <class T, class F>
Var<T> op_finish(Graph<T>& g, const char* name, Var<T> out, bool any_rg, F&& bwd) {
  if (g.finite_checks()) check_finite(*out, name);
  if (g.grad_enabled() && any_rg) {
    out->requires_grad = true;
    g.record(std::forward<F>(bwd));
  }
  return out;
}

inline int64_t norm_axis(int64_t axis, int64_t rank, const char* name) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(name) + ": axis out of range");
  return axis;
}

}  // namespace detail

template <class T>
Var<T> constant(Graph<T>&, Dims shape, std::vector<T> data) {
  return make_var<T>(std::move(shape), std::move(data), false);
}

// ---------------------------------------------------------------------------
// matmul: [M,K] x [K,N] -> [M,N]
// ---------------------------------------------------------------------------
template <class T>
Var<T> matmul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  if (a->rank() != 2 || b->rank() != 2)
    throw ShapeError("matmul expects rank-2 inputs, got " + dims_str(a->shape) + " and " + dims_str(b->shape));
  if (a->dim(1) != b->dim(0))
    throw ShapeError("matmul inner dims differ: " + dims_str(a->shape) + " vs " + dims_str(b->shape));
  detail::op_inputs(g, "matmul", {a.get(), b.get()});
  const int64_t M = a->dim(0), K = a->dim(1), N = b->dim(1);
  auto out = make_var<T>({M, N});
  kern::gemm_acc(a->data.data(), b->data.data(), out->data.data(), M, K, N, true);
  const bool rg = a->requires_grad || b->requires_grad;
  return detail::op_finish(g, "matmul", out, rg, [a, b, out, M, K, N]() {
    if (!out->has_grad()) return;
    if (a->requires_grad) {
      a->ensure_grad();  // dA += dC * B^T
      std::vector<T> bt(static_cast<size_t>(K * N));
      kern::transpose2d(b->data.data(), bt.data(), K, N);
      kern::gemm_acc(out->grad.data(), bt.data(), a->grad.data(), M, N, K, true);
    }
    if (b->requires_grad) {
      b->ensure_grad();  // dB += A^T * dC
      std::vector<T> at(static_cast<size_t>(M * K));
      kern::transpose2d(a->data.data(), at.data(), M, K);
      kern::gemm_acc(at.data(), out->grad.data(), b->grad.data(), K, M, N, true);
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d: x[B,C,H,W] * w[F,C,kh,kw] -> [B,F,Ho,Wo]
// ---------------------------------------------------------------------------
template <class T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& w, int64_t stride, int64_t pad) {
  if (x->rank() != 4 || w->rank() != 4)
    throw ShapeError("conv2d expects x[B,C,H,W], w[F,C,kh,kw]; got " + dims_str(x->shape) + ", " + dims_str(w->shape));
  if (x->dim(1) != w->dim(1))
    throw ShapeError("conv2d channel mismatch: " + dims_str(x->shape) + " vs " + dims_str(w->shape));
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/pad");
  const int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const int64_t F = w->dim(0), kh = w->dim(2), kw = w->dim(3);
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
  detail::op_inputs(g, "conv2d", {x.get(), w.get()});
  auto out = make_var<T>({B, F, Ho, Wo});
  const int64_t ck = C * kh * kw, hw = Ho * Wo;
#pragma omp parallel for schedule(static) if (B > 1)
  for (int64_t b = 0; b < B; ++b) {
    std::vector<T> col(static_cast<size_t>(ck * hw));
    kern::im2col(x->data.data() + b * C * H * W, col.data(), C, H, W, kh, kw, stride, pad, Ho, Wo);
    kern::gemm_acc(w->data.data(), col.data(), out->data.data() + b * F * hw, F, ck, hw, B == 1);
  }
  const bool rg = x->requires_grad || w->requires_grad;
  return detail::op_finish(g, "conv2d", out, rg, [x, w, out, stride, pad, B, C, H, W, F, kh, kw, Ho, Wo]() {
    if (!out->has_grad()) return;
    const int64_t ck = C * kh * kw, hw = Ho * Wo;
    if (x->requires_grad) {
      x->ensure_grad();
      std::vector<T> wt(static_cast<size_t>(ck * F));  // w^T: [ck, F]
      kern::transpose2d(w->data.data(), wt.data(), F, ck);
#pragma omp parallel for schedule(static) if (B > 1)
      for (int64_t b = 0; b < B; ++b) {
        std::vector<T> dcol(static_cast<size_t>(ck * hw), T(0));
        kern::gemm_acc(wt.data(), out->grad.data() + b * F * hw, dcol.data(), ck, F, hw, B == 1);
        kern::col2im_acc(dcol.data(), x->grad.data() + b * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo);
      }
    }
    if (w->requires_grad) {
      w->ensure_grad();
      // dW += sum_b dY_b * col_b^T. Per-image partials are computed in
      // parallel, then reduced in ascending batch order so the result is
      // identical for any thread count. Chunked to bound scratch memory.
      const int64_t wn = F * ck;
      const int64_t chunk = std::max<int64_t>(1, std::min<int64_t>(B, (1 << 22) / std::max<int64_t>(wn, 1)));
      std::vector<T> partial(static_cast<size_t>(chunk * wn));
      for (int64_t b0 = 0; b0 < B; b0 += chunk) {
        const int64_t bn = std::min(chunk, B - b0);
        std::fill(partial.begin(), partial.begin() + bn * wn, T(0));
#pragma omp parallel for schedule(static) if (bn > 1)
        for (int64_t bi = 0; bi < bn; ++bi) {
          std::vector<T> colt(static_cast<size_t>(ck * hw));
          kern::im2col_t(x->data.data() + (b0 + bi) * C * H * W, colt.data(), C, H, W, kh, kw, stride, pad, Ho, Wo);
          kern::gemm_acc(out->grad.data() + (b0 + bi) * F * hw, colt.data(), partial.data() + bi * wn, F, hw, ck,
                         bn == 1);
        }
        for (int64_t bi = 0; bi < bn; ++bi) {
          const T* src = partial.data() + bi * wn;
          T* dst = w->grad.data();
#pragma omp simd
          for (int64_t i = 0; i < wn; ++i) dst[i] += src[i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// add: equal shapes, channel bias ([B,C,H,W] + [C]) or row bias ([...,N] + [N])
// ---------------------------------------------------------------------------
template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::op_inputs(g, "add", {a.get(), b.get()});
  const bool rg = a->requires_grad || b->requires_grad;
  if (a->shape == b->shape) {
    auto out = make_var<T>(a->shape);
    const int64_t n = a->size();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
    return detail::op_finish(g, "add", out, rg, [a, b, out]() {
      if (!out->has_grad()) return;
      const int64_t n = out->size();
      if (a->requires_grad) {
        a->ensure_grad();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
        for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
      }
    });
  }
  if (b->rank() == 1 && a->rank() == 4 && b->dim(0) == a->dim(1)) {
    // channel bias
    const int64_t B = a->dim(0), C = a->dim(1), HW = a->dim(2) * a->dim(3);
    auto out = make_var<T>(a->shape);
#pragma omp parallel for schedule(static) if (B > 1)
    for (int64_t bi = 0; bi < B; ++bi)
      for (int64_t c = 0; c < C; ++c) {
        const T bv = b->data[c];
        const T* pa = a->data.data() + (bi * C + c) * HW;
        T* po = out->data.data() + (bi * C + c) * HW;
#pragma omp simd
        for (int64_t i = 0; i < HW; ++i) po[i] = pa[i] + bv;
      }
    return detail::op_finish(g, "add", out, rg, [a, b, out, B, C, HW]() {
      if (!out->has_grad()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        const int64_t n = out->size();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t bi = 0; bi < B; ++bi)
          for (int64_t c = 0; c < C; ++c) {
            const T* po = out->grad.data() + (bi * C + c) * HW;
            T s = T(0);
            for (int64_t i = 0; i < HW; ++i) s += po[i];
            b->grad[c] += s;
          }
      }
    });
  }
  if (b->rank() == 1 && a->rank() >= 2 && b->dim(0) == a->shape.back()) {
    // trailing-dim (row) bias
    const int64_t N = b->dim(0), R = a->size() / N;
    auto out = make_var<T>(a->shape);
#pragma omp parallel for schedule(static) if (R > 1)
    for (int64_t r = 0; r < R; ++r) {
      const T* pa = a->data.data() + r * N;
      T* po = out->data.data() + r * N;
#pragma omp simd
      for (int64_t j = 0; j < N; ++j) po[j] = pa[j] + b->data[j];
    }
    return detail::op_finish(g, "add", out, rg, [a, b, out, R, N]() {
      if (!out->has_grad()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        const int64_t n = out->size();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
          const T* po = out->grad.data() + r * N;
          for (int64_t j = 0; j < N; ++j) b->grad[j] += po[j];
        }
      }
    });
  }
  throw ShapeError("add: incompatible shapes " + dims_str(a->shape) + " + " + dims_str(b->shape));
}

// ---------------------------------------------------------------------------
// mul: elementwise (equal shapes) or scalar broadcast (b of shape [1])
// ---------------------------------------------------------------------------
template <class T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::op_inputs(g, "mul", {a.get(), b.get()});
  const bool rg = a->requires_grad || b->requires_grad;
  if (b->size() == 1 && a->shape != b->shape) {
    auto out = make_var<T>(a->shape);
    const T s = b->data[0];
    const int64_t n = a->size();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * s;
    return detail::op_finish(g, "mul", out, rg, [a, b, out]() {
      if (!out->has_grad()) return;
      const int64_t n = out->size();
      if (a->requires_grad) {
        a->ensure_grad();
        const T s = b->data[0];
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * s;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        T s = T(0);
        for (int64_t i = 0; i < n; ++i) s += out->grad[i] * a->data[i];
        b->grad[0] += s;
      }
    });
  }
  if (a->shape != b->shape)
    throw ShapeError("mul: incompatible shapes " + dims_str(a->shape) + " * " + dims_str(b->shape));
  auto out = make_var<T>(a->shape);
  const int64_t n = a->size();
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
  return detail::op_finish(g, "mul", out, rg, [a, b, out]() {
    if (!out->has_grad()) return;
    const int64_t n = out->size();
    if (a->requires_grad) {
      a->ensure_grad();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
      for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
      for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->data[i];
    }
  });
}

/// a * s with a non-differentiable scalar constant.
template <class T>
Var<T> scale(Graph<T>& g, const Var<T>& a, T s) {
  return mul(g, a, scalar_var<T>(s));
}

/// a - b, composed from add/scale.
template <class T>
Var<T> sub(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  return add(g, a, scale(g, b, T(-1)));
}

// ---------------------------------------------------------------------------
// relu / gelu
// ---------------------------------------------------------------------------
template <class T>
Var<T> relu(Graph<T>& g, const Var<T>& x) {
  detail::op_inputs(g, "relu", {x.get()});
  auto out = make_var<T>(x->shape);
  const int64_t n = x->size();
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
  return detail::op_finish(g, "relu", out, x->requires_grad, [x, out]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = x->size();
    // subgradient at exactly 0 is taken as 0
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
    for (int64_t i = 0; i < n; ++i) x->grad[i] += x->data[i] > T(0) ? out->grad[i] : T(0);
  });
}

template <class T>
Var<T> gelu(Graph<T>& g, const Var<T>& x) {
  detail::op_inputs(g, "gelu", {x.get()});
  auto out = make_var<T>(x->shape);
  const int64_t n = x->size();
  const T inv_sqrt2 = T(0.7071067811865475);
#pragma omp parallel for schedule(static) if (n > (1 << 14))
  for (int64_t i = 0; i < n; ++i) {
    const T v = x->data[i];
    out->data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return detail::op_finish(g, "gelu", out, x->requires_grad, [x, out]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = x->size();
    const T inv_sqrt2 = T(0.7071067811865475);
    const T inv_sqrt2pi = T(0.3989422804014327);
#pragma omp parallel for schedule(static) if (n > (1 << 14))
    for (int64_t i = 0; i < n; ++i) {
      const T v = x->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      x->grad[i] += out->grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// softmax over the last axis
// ---------------------------------------------------------------------------
template <class T>
Var<T> softmax(Graph<T>& g, const Var<T>& x) {
  if (x->rank() < 1) throw ShapeError("softmax: rank-0 input");
  detail::op_inputs(g, "softmax", {x.get()});
  const int64_t N = x->shape.back(), R = x->size() / N;
  auto out = make_var<T>(x->shape);
#pragma omp parallel for schedule(static) if (R > 4)
  for (int64_t r = 0; r < R; ++r) {
    const T* px = x->data.data() + r * N;
    T* po = out->data.data() + r * N;
    T mx = px[0];
    for (int64_t j = 1; j < N; ++j) mx = std::max(mx, px[j]);
    double denom = 0;
    for (int64_t j = 0; j < N; ++j) {
      po[j] = std::exp(px[j] - mx);
      denom += static_cast<double>(po[j]);
    }
    const T inv = T(1.0 / denom);
    for (int64_t j = 0; j < N; ++j) po[j] *= inv;
  }
  return detail::op_finish(g, "softmax", out, x->requires_grad, [x, out, R, N]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (R > 4)
    for (int64_t r = 0; r < R; ++r) {
      const T* y = out->data.data() + r * N;
      const T* dy = out->grad.data() + r * N;
      T* dx = x->grad.data() + r * N;
      double dot = 0;
      for (int64_t j = 0; j < N; ++j) dot += static_cast<double>(dy[j]) * y[j];
      const T d = static_cast<T>(dot);
      for (int64_t j = 0; j < N; ++j) dx[j] += y[j] * (dy[j] - d);
    }
  });
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis, affine params gamma/beta of shape [N]
// ---------------------------------------------------------------------------
template <class T>
Var<T> layer_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const int64_t N = x->shape.back();
  if (gamma->shape != Dims{N} || beta->shape != Dims{N})
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(N) + "]");
  detail::op_inputs(g, "layer_norm", {x.get(), gamma.get(), beta.get()});
  const int64_t R = x->size() / N;
  auto out = make_var<T>(x->shape);
  auto invstd = std::make_shared<std::vector<T>>(R);
  auto mean = std::make_shared<std::vector<T>>(R);
#pragma omp parallel for schedule(static) if (R > 4)
  for (int64_t r = 0; r < R; ++r) {
    const T* px = x->data.data() + r * N;
    double mu = 0;
    for (int64_t j = 0; j < N; ++j) mu += px[j];
    mu /= N;
    double var = 0;
    for (int64_t j = 0; j < N; ++j) {
      const double d = px[j] - mu;
      var += d * d;
    }
    var /= N;
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*mean)[r] = static_cast<T>(mu);
    (*invstd)[r] = is;
    T* po = out->data.data() + r * N;
    for (int64_t j = 0; j < N; ++j) po[j] = (px[j] - static_cast<T>(mu)) * is * gamma->data[j] + beta->data[j];
  }
  const bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
  return detail::op_finish(g, "layer_norm", out, rg, [x, gamma, beta, out, mean, invstd, R, N]() {
    if (!out->has_grad()) return;
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad || beta->requires_grad) {
      // row loop kept serial: gamma/beta accumulate across rows
      for (int64_t r = 0; r < R; ++r) {
        const T* px = x->data.data() + r * N;
        const T* dy = out->grad.data() + r * N;
        const T mu = (*mean)[r], is = (*invstd)[r];
        for (int64_t j = 0; j < N; ++j) {
          const T xhat = (px[j] - mu) * is;
          if (gamma->requires_grad) gamma->grad[j] += dy[j] * xhat;
          if (beta->requires_grad) beta->grad[j] += dy[j];
        }
      }
    }
#pragma omp parallel for schedule(static) if (R > 4)
    for (int64_t r = 0; r < R; ++r) {
      const T* px = x->data.data() + r * N;
      const T* dy = out->grad.data() + r * N;
      const T mu = (*mean)[r], is = (*invstd)[r];
      if (x->requires_grad) {
        double s1 = 0, s2 = 0;  // mean(g*dy), mean(g*dy*xhat)
        for (int64_t j = 0; j < N; ++j) {
          const T gd = gamma->data[j] * dy[j];
          const T xhat = (px[j] - mu) * is;
          s1 += gd;
          s2 += static_cast<double>(gd) * xhat;
        }
        s1 /= N;
        s2 /= N;
        T* dx = x->grad.data() + r * N;
        for (int64_t j = 0; j < N; ++j) {
          const T gd = gamma->data[j] * dy[j];
          const T xhat = (px[j] - mu) * is;
          dx[j] += is * (gd - static_cast<T>(s1) - xhat * static_cast<T>(s2));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// group_norm: x[B,C,H,W], per-channel affine, statistics per (batch, group)
// ---------------------------------------------------------------------------
template <class T>
Var<T> group_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int64_t groups,
                  T eps = T(1e-5)) {
  if (x->rank() != 4) throw ShapeError("group_norm expects [B,C,H,W], got " + dims_str(x->shape));
  const int64_t B = x->dim(0), C = x->dim(1), HW = x->dim(2) * x->dim(3);
  if (groups < 1 || C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma->shape != Dims{C} || beta->shape != Dims{C})
    throw ShapeError("group_norm: gamma/beta must be [" + std::to_string(C) + "]");
  detail::op_inputs(g, "group_norm", {x.get(), gamma.get(), beta.get()});
  const int64_t cg = C / groups, gn = cg * HW;
  auto out = make_var<T>(x->shape);
  auto mean = std::make_shared<std::vector<T>>(B * groups);
  auto invstd = std::make_shared<std::vector<T>>(B * groups);
#pragma omp parallel for schedule(static) if (B > 1)
  for (int64_t b = 0; b < B; ++b)
    for (int64_t gi = 0; gi < groups; ++gi) {
      const T* px = x->data.data() + (b * C + gi * cg) * HW;
      double mu = 0;
      for (int64_t i = 0; i < gn; ++i) mu += px[i];
      mu /= gn;
      double var = 0;
      for (int64_t i = 0; i < gn; ++i) {
        const double d = px[i] - mu;
        var += d * d;
      }
      var /= gn;
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      (*mean)[b * groups + gi] = static_cast<T>(mu);
      (*invstd)[b * groups + gi] = is;
      T* po = out->data.data() + (b * C + gi * cg) * HW;
      for (int64_t c = 0; c < cg; ++c) {
        const T ga = gamma->data[gi * cg + c], be = beta->data[gi * cg + c];
        for (int64_t i = 0; i < HW; ++i)
          po[c * HW + i] = (px[c * HW + i] - static_cast<T>(mu)) * is * ga + be;
      }
    }
  const bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
  return detail::op_finish(g, "group_norm", out, rg,
                           [x, gamma, beta, out, mean, invstd, B, C, HW, groups, cg, gn]() {
    if (!out->has_grad()) return;
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad || beta->requires_grad) {
      // batch loop kept serial: gamma/beta accumulate across the batch
      for (int64_t b = 0; b < B; ++b)
        for (int64_t gi = 0; gi < groups; ++gi) {
          const T* px = x->data.data() + (b * C + gi * cg) * HW;
          const T* dy = out->grad.data() + (b * C + gi * cg) * HW;
          const T mu = (*mean)[b * groups + gi], is = (*invstd)[b * groups + gi];
          for (int64_t c = 0; c < cg; ++c) {
            double dg = 0, db = 0;
            for (int64_t i = 0; i < HW; ++i) {
              const T xhat = (px[c * HW + i] - mu) * is;
              dg += static_cast<double>(dy[c * HW + i]) * xhat;
              db += dy[c * HW + i];
            }
            if (gamma->requires_grad) gamma->grad[gi * cg + c] += static_cast<T>(dg);
            if (beta->requires_grad) beta->grad[gi * cg + c] += static_cast<T>(db);
          }
        }
    }
#pragma omp parallel for schedule(static) collapse(2) if (B > 1)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t gi = 0; gi < groups; ++gi) {
        const T* px = x->data.data() + (b * C + gi * cg) * HW;
        const T* dy = out->grad.data() + (b * C + gi * cg) * HW;
        const T mu = (*mean)[b * groups + gi], is = (*invstd)[b * groups + gi];
        if (x->requires_grad) {
          double s1 = 0, s2 = 0;
          for (int64_t c = 0; c < cg; ++c) {
            const T ga = gamma->data[gi * cg + c];
            for (int64_t i = 0; i < HW; ++i) {
              const T gd = ga * dy[c * HW + i];
              const T xhat = (px[c * HW + i] - mu) * is;
              s1 += gd;
              s2 += static_cast<double>(gd) * xhat;
            }
          }
          s1 /= gn;
          s2 /= gn;
          T* dx = x->grad.data() + (b * C + gi * cg) * HW;
          for (int64_t c = 0; c < cg; ++c) {
            const T ga = gamma->data[gi * cg + c];
            for (int64_t i = 0; i < HW; ++i) {
              const T gd = ga * dy[c * HW + i];
              const T xhat = (px[c * HW + i] - mu) * is;
              dx[c * HW + i] += is * (gd - static_cast<T>(s1) - xhat * static_cast<T>(s2));
            }
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// reductions to a scalar [1]
// ---------------------------------------------------------------------------
template <class T>
Var<T> sum_all(Graph<T>& g, const Var<T>& x) {
  detail::op_inputs(g, "sum", {x.get()});
  double acc = 0;  // fixed sequential row-major order
  for (const T v : x->data) acc += v;
  auto out = make_var<T>({1}, std::vector<T>{static_cast<T>(acc)});
  return detail::op_finish(g, "sum", out, x->requires_grad, [x, out]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    const T d = out->grad[0];
    const int64_t n = x->size();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += d;
  });
}

template <class T>
Var<T> mean_all(Graph<T>& g, const Var<T>& x) {
  detail::op_inputs(g, "mean", {x.get()});
  if (x->size() == 0) throw ShapeError("mean of empty tensor");
  double acc = 0;
  for (const T v : x->data) acc += v;
  const int64_t n = x->size();
  auto out = make_var<T>({1}, std::vector<T>{static_cast<T>(acc / n)});
  return detail::op_finish(g, "mean", out, x->requires_grad, [x, out, n]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    const T d = out->grad[0] / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) x->grad[i] += d;
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------
template <class T>
Var<T> reshape(Graph<T>& g, const Var<T>& x, Dims shape) {
  if (numel(shape) != x->size())
    throw ShapeError("reshape: cannot view " + dims_str(x->shape) + " as " + dims_str(shape));
  auto out = make_var<T>(std::move(shape), x->data);
  out->finite_verified = x->finite_verified;
  return detail::op_finish(g, "reshape", out, x->requires_grad, [x, out]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = x->size();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
    for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
  });
}

namespace detail {
template <class T>
void permute_copy(const T* in, T* out, const Dims& in_shape, const std::vector<int64_t>& perm) {
  const int64_t rank = static_cast<int64_t>(in_shape.size());
  Dims out_shape(rank), in_strides(rank), out_map(rank);
  int64_t s = 1;
  for (int64_t i = rank - 1; i >= 0; --i) {
    in_strides[i] = s;
    s *= in_shape[i];
  }
  for (int64_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
  // stride in the input for each output axis
  for (int64_t i = 0; i < rank; ++i) out_map[i] = in_strides[perm[i]];
  if (rank == 3) {
    const int64_t D0 = out_shape[0], D1 = out_shape[1], D2 = out_shape[2];
    const int64_t s0 = out_map[0], s1 = out_map[1], s2 = out_map[2];
#pragma omp parallel for schedule(static) if (D0 > 1)
    for (int64_t a = 0; a < D0; ++a)
      for (int64_t b = 0; b < D1; ++b) {
        T* po = out + (a * D1 + b) * D2;
        const T* pi = in + a * s0 + b * s1;
        for (int64_t c = 0; c < D2; ++c) po[c] = pi[c * s2];
      }
    return;
  }
  if (rank == 4) {
    const int64_t D0 = out_shape[0], D1 = out_shape[1], D2 = out_shape[2], D3 = out_shape[3];
    const int64_t s0 = out_map[0], s1 = out_map[1], s2 = out_map[2], s3 = out_map[3];
#pragma omp parallel for schedule(static) if (D0 > 1)
    for (int64_t a = 0; a < D0; ++a)
      for (int64_t b = 0; b < D1; ++b)
        for (int64_t c = 0; c < D2; ++c) {
          T* po = out + ((a * D1 + b) * D2 + c) * D3;
          const T* pi = in + a * s0 + b * s1 + c * s2;
          for (int64_t d = 0; d < D3; ++d) po[d] = pi[d * s3];
        }
    return;
  }
  const int64_t n = numel(in_shape);
  Dims idx(rank, 0);
  int64_t src = 0;
  for (int64_t o = 0; o < n; ++o) {
    out[o] = in[src];
    for (int64_t i = rank - 1; i >= 0; --i) {
      idx[i]++;
      src += out_map[i];
      if (idx[i] < out_shape[i]) break;
      src -= out_map[i] * out_shape[i];
      idx[i] = 0;
    }
  }
}
}  // namespace detail

template <class T>
Var<T> transpose(Graph<T>& g, const Var<T>& x, std::vector<int64_t> perm) {
  const int64_t rank = x->rank();
  if (static_cast<int64_t>(perm.size()) != rank) throw ShapeError("transpose: perm rank mismatch");
  std::vector<bool> seen(rank, false);
  for (int64_t p : perm) {
    if (p < 0 || p >= rank || seen[p]) throw ShapeError("transpose: invalid permutation");
    seen[p] = true;
  }
  Dims out_shape(rank);
  for (int64_t i = 0; i < rank; ++i) out_shape[i] = x->shape[perm[i]];
  auto out = make_var<T>(out_shape);
  detail::permute_copy(x->data.data(), out->data.data(), x->shape, perm);
  return detail::op_finish(g, "transpose", out, x->requires_grad, [x, out, perm, rank]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    std::vector<int64_t> inv(rank);
    for (int64_t i = 0; i < rank; ++i) inv[perm[i]] = i;
    std::vector<T> tmp(x->data.size());
    detail::permute_copy(out->grad.data(), tmp.data(), out->shape, inv);
    const int64_t n = x->size();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += tmp[i];
  });
}

template <class T>
Var<T> concat(Graph<T>& g, const std::vector<Var<T>>& xs, int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int64_t rank = xs[0]->rank();
  axis = detail::norm_axis(axis, rank, "concat");
  Dims out_shape = xs[0]->shape;
  int64_t total = 0;
  for (const auto& x : xs) {
    if (x->rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int64_t i = 0; i < rank; ++i)
      if (i != axis && x->shape[i] != out_shape[i])
        throw ShapeError("concat: shape mismatch " + dims_str(x->shape) + " vs " + dims_str(out_shape));
    total += x->dim(axis);
  }
  out_shape[axis] = total;
  bool rg = false;
  for (const auto& x : xs) {
    detail::op_inputs(g, "concat", {x.get()});
    rg = rg || x->requires_grad;
  }
  auto out = make_var<T>(out_shape);
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int64_t i = axis + 1; i < rank; ++i) inner *= out_shape[i];
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t len = x->dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(x->data.data() + o * len, len, out->data.data() + o * total * inner + off);
    off += len;
  }
  return detail::op_finish(g, "concat", out, rg, [xs, out, outer, inner, total]() {
    if (!out->has_grad()) return;
    int64_t off = 0;
    for (const auto& x : xs) {
      const int64_t len = x->size() / outer;
      if (x->requires_grad) {
        x->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = out->grad.data() + o * total * inner + off;
          T* dst = x->grad.data() + o * len;
          for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
        }
      }
      off += len;
    }
  });
}

template <class T>
Var<T> slice(Graph<T>& g, const Var<T>& x, int64_t axis, int64_t begin, int64_t end) {
  const int64_t rank = x->rank();
  axis = detail::norm_axis(axis, rank, "slice");
  if (begin < 0 || end > x->dim(axis) || begin >= end)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     dims_str(x->shape));
  detail::op_inputs(g, "slice", {x.get()});
  Dims out_shape = x->shape;
  out_shape[axis] = end - begin;
  auto out = make_var<T>(out_shape);
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x->shape[i];
  for (int64_t i = axis + 1; i < rank; ++i) inner *= x->shape[i];
  const int64_t in_len = x->dim(axis) * inner, out_len = (end - begin) * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x->data.data() + o * in_len + begin * inner, out_len, out->data.data() + o * out_len);
  return detail::op_finish(g, "slice", out, x->requires_grad, [x, out, outer, inner, in_len, out_len, begin]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      const T* src = out->grad.data() + o * out_len;
      T* dst = x->grad.data() + o * in_len + begin * inner;
      for (int64_t i = 0; i < out_len; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// avg_pool2d, non-overlapping windows (stride == window)
// ---------------------------------------------------------------------------
template <class T>
Var<T> avg_pool2d(Graph<T>& g, const Var<T>& x, int64_t kh, int64_t kw) {
  if (x->rank() != 4) throw ShapeError("avg_pool2d expects [B,C,H,W], got " + dims_str(x->shape));
  const int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  if (kh < 1 || kw < 1 || H % kh != 0 || W % kw != 0)
    throw ShapeError("avg_pool2d: input " + dims_str(x->shape) + " not divisible by window " + std::to_string(kh) +
                     "x" + std::to_string(kw));
  detail::op_inputs(g, "avg_pool2d", {x.get()});
  const int64_t Ho = H / kh, Wo = W / kw;
  auto out = make_var<T>({B, C, Ho, Wo});
  const T inv = T(1) / static_cast<T>(kh * kw);
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* px = x->data.data() + bc * H * W;
    T* po = out->data.data() + bc * Ho * Wo;
    for (int64_t oi = 0; oi < Ho; ++oi)
      for (int64_t oj = 0; oj < Wo; ++oj) {
        double s = 0;
        for (int64_t di = 0; di < kh; ++di)
          for (int64_t dj = 0; dj < kw; ++dj) s += px[(oi * kh + di) * W + oj * kw + dj];
        po[oi * Wo + oj] = static_cast<T>(s) * inv;
      }
  }
  return detail::op_finish(g, "avg_pool2d", out, x->requires_grad, [x, out, B, C, H, W, kh, kw, Ho, Wo, inv]() {
    if (!out->has_grad() || !x->requires_grad) return;
    x->ensure_grad();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const T* po = out->grad.data() + bc * Ho * Wo;
      T* px = x->grad.data() + bc * H * W;
      for (int64_t oi = 0; oi < Ho; ++oi)
        for (int64_t oj = 0; oj < Wo; ++oj) {
          const T d = po[oi * Wo + oj] * inv;
          for (int64_t di = 0; di < kh; ++di)
            for (int64_t dj = 0; dj < kw; ++dj) px[(oi * kh + di) * W + oj * kw + dj] += d;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// scaled dot-product attention: q,k,v of [B,Hh,Tt,Dd] -> [B,Hh,Tt,Dd]
// Optionally copies the post-softmax attention probabilities (for saliency).
// ---------------------------------------------------------------------------
template <class T>
Var<T> scaled_dot_product_attention(Graph<T>& g, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                                    std::vector<T>* probs_out = nullptr) {
  if (q->rank() != 4 || k->shape != q->shape || v->shape != q->shape)
    throw ShapeError("attention expects q,k,v of identical [B,H,T,D] shapes");
  detail::op_inputs(g, "scaled_dot_product_attention", {q.get(), k.get(), v.get()});
  const int64_t B = q->dim(0), Hh = q->dim(1), Tt = q->dim(2), Dd = q->dim(3);
  const T sc = T(1) / static_cast<T>(std::sqrt(static_cast<double>(Dd)));
  auto out = make_var<T>(q->shape);
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(B * Hh * Tt * Tt));
#pragma omp parallel for schedule(static) if (B * Hh > 1)
  for (int64_t bh = 0; bh < B * Hh; ++bh) {
    const T* pq = q->data.data() + bh * Tt * Dd;
    const T* pk = k->data.data() + bh * Tt * Dd;
    const T* pv = v->data.data() + bh * Tt * Dd;
    T* pp = probs->data() + bh * Tt * Tt;
    std::vector<T> kt(static_cast<size_t>(Dd * Tt));
    kern::transpose2d(pk, kt.data(), Tt, Dd);
    std::fill(pp, pp + Tt * Tt, T(0));
    kern::gemm_acc(pq, kt.data(), pp, Tt, Dd, Tt, false);
    for (int64_t i = 0; i < Tt; ++i) {
      T* row = pp + i * Tt;
      T mx = row[0] * sc;
      for (int64_t j = 0; j < Tt; ++j) mx = std::max(mx, row[j] * sc);
      double denom = 0;
      for (int64_t j = 0; j < Tt; ++j) {
        row[j] = std::exp(row[j] * sc - mx);
        denom += static_cast<double>(row[j]);
      }
      const T inv = T(1.0 / denom);
      for (int64_t j = 0; j < Tt; ++j) row[j] *= inv;
    }
    T* po = out->data.data() + bh * Tt * Dd;
    kern::gemm_acc(pp, pv, po, Tt, Tt, Dd, false);
  }
  if (probs_out) *probs_out = *probs;
  const bool rg = q->requires_grad || k->requires_grad || v->requires_grad;
  return detail::op_finish(g, "scaled_dot_product_attention", out, rg, [q, k, v, out, probs, B, Hh, Tt, Dd, sc]() {
    if (!out->has_grad()) return;
    if (q->requires_grad) q->ensure_grad();
    if (k->requires_grad) k->ensure_grad();
    if (v->requires_grad) v->ensure_grad();
#pragma omp parallel for schedule(static) if (B * Hh > 1)
    for (int64_t bh = 0; bh < B * Hh; ++bh) {
      const T* pq = q->data.data() + bh * Tt * Dd;
      const T* pk = k->data.data() + bh * Tt * Dd;
      const T* pv = v->data.data() + bh * Tt * Dd;
      const T* pp = probs->data() + bh * Tt * Tt;
      const T* dout = out->grad.data() + bh * Tt * Dd;
      std::vector<T> scratch(static_cast<size_t>(Tt * std::max(Tt, Dd)));
      if (v->requires_grad) {
        // dV += P^T dO
        std::vector<T> pt(static_cast<size_t>(Tt * Tt));
        kern::transpose2d(pp, pt.data(), Tt, Tt);
        kern::gemm_acc(pt.data(), dout, v->grad.data() + bh * Tt * Dd, Tt, Tt, Dd, false);
      }
      if (q->requires_grad || k->requires_grad) {
        // dP = dO V^T, then backprop through row softmax into dS
        std::vector<T> vt(static_cast<size_t>(Dd * Tt));
        kern::transpose2d(pv, vt.data(), Tt, Dd);
        std::vector<T>& ds = scratch;
        std::fill(ds.begin(), ds.begin() + Tt * Tt, T(0));
        kern::gemm_acc(dout, vt.data(), ds.data(), Tt, Dd, Tt, false);
        for (int64_t i = 0; i < Tt; ++i) {
          const T* prow = pp + i * Tt;
          T* drow = ds.data() + i * Tt;
          double dot = 0;
          for (int64_t j = 0; j < Tt; ++j) dot += static_cast<double>(drow[j]) * prow[j];
          for (int64_t j = 0; j < Tt; ++j) drow[j] = prow[j] * (drow[j] - static_cast<T>(dot)) * sc;
        }
        if (q->requires_grad)  // dQ += dS K
          kern::gemm_acc(ds.data(), pk, q->grad.data() + bh * Tt * Dd, Tt, Tt, Dd, false);
        if (k->requires_grad) {  // dK += dS^T Q
          std::vector<T> dst(static_cast<size_t>(Tt * Tt));
          kern::transpose2d(ds.data(), dst.data(), Tt, Tt);
          kern::gemm_acc(dst.data(), pq, k->grad.data() + bh * Tt * Dd, Tt, Tt, Dd, false);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// embedding_lookup: table[V,E] gathered by integer indices -> [n,E]
// ---------------------------------------------------------------------------
template <class T>
Var<T> embedding_lookup(Graph<T>& g, const Var<T>& table, std::vector<int64_t> indices) {
  if (table->rank() != 2) throw ShapeError("embedding_lookup: table must be [V,E], got " + dims_str(table->shape));
  const int64_t V = table->dim(0), E = table->dim(1);
  for (int64_t id : indices)
    if (id < 0 || id >= V) throw ShapeError("embedding_lookup: index " + std::to_string(id) + " out of range");
  detail::op_inputs(g, "embedding_lookup", {table.get()});
  const int64_t n = static_cast<int64_t>(indices.size());
  auto out = make_var<T>({n, E});
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(table->data.data() + indices[i] * E, E, out->data.data() + i * E);
  return detail::op_finish(g, "embedding_lookup", out, table->requires_grad, [table, out, indices, E]() {
    if (!out->has_grad() || !table->requires_grad) return;
    table->ensure_grad();
    const int64_t n = static_cast<int64_t>(indices.size());
    for (int64_t i = 0; i < n; ++i) {
      const T* src = out->grad.data() + i * E;
      T* dst = table->grad.data() + indices[i] * E;
      for (int64_t j = 0; j < E; ++j) dst[j] += src[j];
    }
  });
}

// ---------------------------------------------------------------------------
// composite helpers
// ---------------------------------------------------------------------------

/// Mean squared error over all elements.
template <class T>
Var<T> mse(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  if (a->shape != b->shape)
    throw ShapeError("mse: shapes differ " + dims_str(a->shape) + " vs " + dims_str(b->shape));
  auto d = sub(g, a, b);
  return mean_all(g, mul(g, d, d));
}

}  // namespace vistill
