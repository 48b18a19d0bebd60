// SPDX-License-Identifier: Apache-2.0
//
// AVX2/FMA kernels. Compiled with -mavx2 -mfma and reached only after the
// runtime CPU check in kernels.cpp passes. gemm_nn/gemm_tn keep 4x8 output
// tiles in registers; gemm_nt is a vectorized dot product per element.

#ifdef NMIL_HAVE_AVX2

#include <immintrin.h>

#include <algorithm>

#include "kernels_impl.hpp"

namespace nmil::kernels::avx2_impl {

namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

inline double dot_avx(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Shared inner tile for gemm_nn / gemm_tn: c[i..i+3][j..j+7] via fmadd with
// a-element loader L(p, r) supplying a(p, i+r) in the contraction order.
template <typename LoadA>
inline void tile4x8(std::size_t k, std::size_t n, const double* b, double* c0,
                    double* c1, double* c2, double* c3, std::size_t j,
                    bool accumulate, LoadA load_a) {
  __m256d acc[4][2];
  for (int r = 0; r < 4; ++r) {
    double* cr = r == 0 ? c0 : r == 1 ? c1 : r == 2 ? c2 : c3;
    acc[r][0] = accumulate ? _mm256_loadu_pd(cr + j) : _mm256_setzero_pd();
    acc[r][1] = accumulate ? _mm256_loadu_pd(cr + j + 4) : _mm256_setzero_pd();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n + j;
    const __m256d vb0 = _mm256_loadu_pd(brow);
    const __m256d vb1 = _mm256_loadu_pd(brow + 4);
    for (int r = 0; r < 4; ++r) {
      const __m256d va = _mm256_set1_pd(load_a(p, r));
      acc[r][0] = _mm256_fmadd_pd(va, vb0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(va, vb1, acc[r][1]);
    }
  }
  _mm256_storeu_pd(c0 + j, acc[0][0]);
  _mm256_storeu_pd(c0 + j + 4, acc[0][1]);
  _mm256_storeu_pd(c1 + j, acc[1][0]);
  _mm256_storeu_pd(c1 + j + 4, acc[1][1]);
  _mm256_storeu_pd(c2 + j, acc[2][0]);
  _mm256_storeu_pd(c2 + j + 4, acc[2][1]);
  _mm256_storeu_pd(c3 + j, acc[3][0]);
  _mm256_storeu_pd(c3 + j + 4, acc[3][1]);
}

// Single output row of a·b, columns [j0, n). One shared routine for every
// row keeps each output element's operation sequence independent of the row's
// position in the matrix, so forward results are bitwise stable under row
// permutation (the attention path relies on this).
__attribute__((noinline)) void nn_row(const double* arow, const double* b, double* crow,
                                      std::size_t j0, std::size_t k, std::size_t n,
                                      bool accumulate) {
  std::size_t j = j0;
  for (; j + 4 <= n; j += 4) {
    __m256d acc = accumulate ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p)
      acc = _mm256_fmadd_pd(_mm256_set1_pd(arow[p]), _mm256_loadu_pd(b + p * n + j), acc);
    _mm256_storeu_pd(crow + j, acc);
  }
  for (; j < n; ++j) {
    double s = accumulate ? crow[j] : 0.0;
    for (std::size_t p = 0; p < k; ++p) s += arow[p] * b[p * n + j];
    crow[j] = s;
  }
}

// Single output row with strided a (aᵀ·b); backward-only, no bitwise contract.
template <typename LoadA>
inline void row_tail(std::size_t k, std::size_t n, const double* b, double* crow,
                     bool accumulate, LoadA load_a) {
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d acc = accumulate ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p)
      acc = _mm256_fmadd_pd(_mm256_set1_pd(load_a(p)), _mm256_loadu_pd(b + p * n + j), acc);
    _mm256_storeu_pd(crow + j, acc);
  }
  for (; j < n; ++j) {
    double s = accumulate ? crow[j] : 0.0;
    for (std::size_t p = 0; p < k; ++p) s += load_a(p) * b[p * n + j];
    crow[j] = s;
  }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  // The 8-wide tiles and nn_row's 4-wide chunks cover exactly the same
  // column split for every row: vector fmadd chains below 4⌊n/4⌋, the shared
  // scalar tail above it.
  const std::size_t jtile = n - n % 8;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + (i + 0) * k;
    const double* a1 = a + (i + 1) * k;
    const double* a2 = a + (i + 2) * k;
    const double* a3 = a + (i + 3) * k;
    double* c0 = c + (i + 0) * n;
    double* c1 = c + (i + 1) * n;
    double* c2 = c + (i + 2) * n;
    double* c3 = c + (i + 3) * n;
    for (std::size_t j = 0; j + 8 <= n; j += 8)
      tile4x8(k, n, b, c0, c1, c2, c3, j, accumulate, [&](std::size_t p, int r) {
        return r == 0 ? a0[p] : r == 1 ? a1[p] : r == 2 ? a2[p] : a3[p];
      });
    if (jtile < n) {
      nn_row(a0, b, c0, jtile, k, n, accumulate);
      nn_row(a1, b, c1, jtile, k, n, accumulate);
      nn_row(a2, b, c2, jtile, k, n, accumulate);
      nn_row(a3, b, c3, jtile, k, n, accumulate);
    }
  }
  for (; i < m; ++i) nn_row(a + i * k, b, c + i * n, 0, k, n, accumulate);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double s = dot_avx(arow, b + j * k, k);
      if (accumulate)
        c[i * n + j] += s;
      else
        c[i * n + j] = s;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + (i + 0) * n;
    double* c1 = c + (i + 1) * n;
    double* c2 = c + (i + 2) * n;
    double* c3 = c + (i + 3) * n;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8)
      tile4x8(k, n, b, c0, c1, c2, c3, j, accumulate,
              [&](std::size_t p, int r) { return a[p * m + i + r]; });
    for (; j < n; ++j) {
      double s0 = accumulate ? c0[j] : 0.0;
      double s1 = accumulate ? c1[j] : 0.0;
      double s2 = accumulate ? c2[j] : 0.0;
      double s3 = accumulate ? c3[j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double bv = b[p * n + j];
        const double* ap = a + p * m + i;
        s0 += ap[0] * bv;
        s1 += ap[1] * bv;
        s2 += ap[2] * bv;
        s3 += ap[3] * bv;
      }
      c0[j] = s0;
      c1[j] = s1;
      c2[j] = s2;
      c3[j] = s3;
    }
  }
  for (; i < m; ++i) {
    row_tail(k, n, b, c + i * n, accumulate, [&](std::size_t p) { return a[p * m + i]; });
  }
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const double* a, double s, double* out, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vs));
  for (; i < n; ++i) out[i] = a[i] * s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double dot(const double* a, const double* b, std::size_t n) { return dot_avx(a, b, n); }

double sum(const double* a, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i];
  return s;
}

double max_index(const double* a, std::size_t n, std::size_t* arg) {
  double best = a[0];
  std::size_t i = 1;
  if (n >= 8) {
    __m256d vmax = _mm256_loadu_pd(a);
    for (i = 4; i + 4 <= n; i += 4) vmax = _mm256_max_pd(vmax, _mm256_loadu_pd(a + i));
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, vmax);
    best = std::max(std::max(lanes[0], lanes[1]), std::max(lanes[2], lanes[3]));
  }
  for (; i < n; ++i) best = std::max(best, a[i]);
  // second pass: lowest index attaining the maximum
  for (std::size_t j = 0; j < n; ++j) {
    if (a[j] == best) {
      *arg = j;
      return best;
    }
  }
  *arg = 0;  // unreachable for finite inputs
  return best;
}

}  // namespace nmil::kernels::avx2_impl

#endif  // NMIL_HAVE_AVX2
