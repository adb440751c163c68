#pragma once

// Low-level numeric kernels shared by the autodiff ops. All kernels keep a
// fixed per-element summation order (ascending k / row-major), so results are
// bitwise identical for any OpenMP thread count: parallelism is only ever
// over disjoint output elements, never over a reduction axis.

#include <cstdint>
#include <cstring>
#include <vector>

namespace vistill::kern {

// Finite scan via exponent-bit inspection; branch-free and vectorizable.
// A value is non-finite iff its exponent field is all ones; adding one ulp of
// exponent then carries into the top bit.
inline bool all_finite(const float* p, size_t n) {
  const uint32_t* u = reinterpret_cast<const uint32_t*>(static_cast<const void*>(p));
  uint32_t acc = 0;
#pragma omp simd reduction(| : acc)
  for (size_t i = 0; i < n; ++i) acc |= ((u[i] & 0x7f800000u) + 0x00800000u) & 0x80000000u;
  return acc == 0;
}

inline bool all_finite(const double* p, size_t n) {
  const uint64_t* u = reinterpret_cast<const uint64_t*>(static_cast<const void*>(p));
  uint64_t acc = 0;
#pragma omp simd reduction(| : acc)
  for (size_t i = 0; i < n; ++i)
    acc |= ((u[i] & 0x7ff0000000000000ull) + 0x0010000000000000ull) & 0x8000000000000000ull;
  return acc == 0;
}

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous. Each C element
// accumulates strictly in ascending k, and each element is produced by
// exactly one thread, so results are bitwise identical for any thread count.
// The 6x16 register tile keeps the accumulators out of memory across k.

namespace detail {

template <class T>
inline void gemm_rows_plain(const T* A, const T* B, T* C, int64_t K, int64_t N, int64_t i0, int64_t i1,
                            int64_t j0, int64_t j1) {
  for (int64_t i = i0; i < i1; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const T ak = a[k];
      const T* b = B + k * N;
#pragma omp simd
      for (int64_t j = j0; j < j1; ++j) c[j] += ak * b[j];
    }
  }
}

}  // namespace detail

template <class T>
void gemm_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N, bool parallel) {
  constexpr int64_t IT = 6, JT = 16;
  const int64_t Mt = (M / IT) * IT;
  const int64_t Nt = (N / JT) * JT;
#pragma omp parallel if (parallel && M >= 2 * IT)
  {
    for (int64_t j0 = 0; j0 < Nt; j0 += JT) {
#pragma omp for schedule(static) nowait
      for (int64_t i0 = 0; i0 < Mt; i0 += IT) {
        T acc[IT][JT];
        const T* a = A + i0 * K;
        T* c = C + i0 * N + j0;
        for (int64_t r = 0; r < IT; ++r)
#pragma omp simd
          for (int64_t j = 0; j < JT; ++j) acc[r][j] = c[r * N + j];
        for (int64_t k = 0; k < K; ++k) {
          const T* b = B + k * N + j0;
          const T a0 = a[k], a1 = a[K + k], a2 = a[2 * K + k];
          const T a3 = a[3 * K + k], a4 = a[4 * K + k], a5 = a[5 * K + k];
#pragma omp simd
          for (int64_t j = 0; j < JT; ++j) {
            const T bv = b[j];
            acc[0][j] += a0 * bv;
            acc[1][j] += a1 * bv;
            acc[2][j] += a2 * bv;
            acc[3][j] += a3 * bv;
            acc[4][j] += a4 * bv;
            acc[5][j] += a5 * bv;
          }
        }
        for (int64_t r = 0; r < IT; ++r)
#pragma omp simd
          for (int64_t j = 0; j < JT; ++j) c[r * N + j] = acc[r][j];
      }
    }
#pragma omp single
    {
      if (Mt < M) detail::gemm_rows_plain(A, B, C, K, N, Mt, M, 0, Nt);  // leftover rows
      if (Nt < N) detail::gemm_rows_plain(A, B, C, K, N, 0, M, Nt, N);   // leftover columns
    }
  }
}

// out[j,i] = in[i,j], in is [R,C]
template <class T>
void transpose2d(const T* in, T* out, int64_t R, int64_t C) {
  constexpr int64_t blk = 32;
  for (int64_t i0 = 0; i0 < R; i0 += blk)
    for (int64_t j0 = 0; j0 < C; j0 += blk) {
      const int64_t i1 = std::min(i0 + blk, R), j1 = std::min(j0 + blk, C);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) out[j * R + i] = in[i * C + j];
    }
}

// im2col for one image: x[C,H,W] -> col[C*kh*kw, Ho*Wo]
template <class T>
void im2col(const T* x, T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t di = 0; di < kh; ++di)
      for (int64_t dj = 0; dj < kw; ++dj) {
        T* dst = col + ((c * kh + di) * kw + dj) * (Ho * Wo);
        for (int64_t oi = 0; oi < Ho; ++oi) {
          const int64_t ii = oi * stride - pad + di;
          if (ii < 0 || ii >= H) {
            for (int64_t oj = 0; oj < Wo; ++oj) dst[oi * Wo + oj] = T(0);
            continue;
          }
          const T* src = x + (c * H + ii) * W;
          for (int64_t oj = 0; oj < Wo; ++oj) {
            const int64_t jj = oj * stride - pad + dj;
            dst[oi * Wo + oj] = (jj < 0 || jj >= W) ? T(0) : src[jj];
          }
        }
      }
}

// im2col directly into transposed layout: colT[Ho*Wo, C*kh*kw].
// Row-sequential writes; used by the weight-gradient GEMM.
template <class T>
void im2col_t(const T* x, T* colT, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
              int64_t stride, int64_t pad, int64_t Ho, int64_t Wo) {
  const int64_t ck = C * kh * kw;
  for (int64_t oi = 0; oi < Ho; ++oi)
    for (int64_t oj = 0; oj < Wo; ++oj) {
      T* row = colT + (oi * Wo + oj) * ck;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t di = 0; di < kh; ++di) {
          const int64_t ii = oi * stride - pad + di;
          T* dst = row + (c * kh + di) * kw;
          if (ii < 0 || ii >= H) {
            for (int64_t dj = 0; dj < kw; ++dj) dst[dj] = T(0);
            continue;
          }
          const T* src = x + (c * H + ii) * W;
          for (int64_t dj = 0; dj < kw; ++dj) {
            const int64_t jj = oj * stride - pad + dj;
            dst[dj] = (jj < 0 || jj >= W) ? T(0) : src[jj];
          }
        }
    }
}

// scatter-add inverse of im2col: x[C,H,W] += col2im(col)
template <class T>
void col2im_acc(const T* col, T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t di = 0; di < kh; ++di)
      for (int64_t dj = 0; dj < kw; ++dj) {
        const T* src = col + ((c * kh + di) * kw + dj) * (Ho * Wo);
        for (int64_t oi = 0; oi < Ho; ++oi) {
          const int64_t ii = oi * stride - pad + di;
          if (ii < 0 || ii >= H) continue;
          T* dst = x + (c * H + ii) * W;
          for (int64_t oj = 0; oj < Wo; ++oj) {
            const int64_t jj = oj * stride - pad + dj;
            if (jj >= 0 && jj < W) dst[jj] += src[oi * Wo + oj];
          }
        }
      }
}

}  // namespace vistill::kern
