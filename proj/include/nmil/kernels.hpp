// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

// Dense double-precision kernels backing the autodiff ops. Each kernel has a
// scalar reference implementation and an AVX2 variant; the active lane is
// picked once from CPU features (override with NMIL_KERNELS=scalar|avx2).
// Lanes agree up to floating-point summation order, not bitwise; the
// equivalence bounds are enforced in tests/test_kernels.cpp.

namespace nmil::kernels {

enum class Lane { scalar, avx2 };

Lane active_lane();
bool lane_available(Lane lane);
const char* lane_name(Lane lane);

// Test hook: select a lane explicitly. Throws ContractError if unavailable.
void force_lane(Lane lane);

// Matrices are row-major. m and n are the output dims, k the contraction dim.
// With accumulate the result is added into c, otherwise c is overwritten.

// c = a·b        a: m×k, b: k×n, c: m×n
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate = false);
// c = a·bᵀ       a: m×k, b: n×k, c: m×n
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate = false);
// c = aᵀ·b       a: k×m, b: k×n, c: m×n
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate = false);

void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double s, double* out, std::size_t n);

// y += alpha·x
void axpy(double alpha, const double* x, double* y, std::size_t n);

double dot(const double* a, const double* b, std::size_t n);
double sum(const double* a, std::size_t n);

// Maximum value of a non-empty array; *arg receives the lowest index that
// attains it.
double max_index(const double* a, std::size_t n, std::size_t* arg);

}  // namespace nmil::kernels
