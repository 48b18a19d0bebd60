// SPDX-License-Identifier: Apache-2.0
//
// Runtime lane selection. The table is initialized once on first use from
// CPU features; NMIL_KERNELS=scalar|avx2 overrides, force_lane() re-selects
// (tests only).

#include "nmil/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <string>

#include "kernels_impl.hpp"
#include "nmil/errors.hpp"

namespace nmil::kernels {

namespace {

struct Table {
  Lane lane;
  void (*gemm_nn)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
  void (*gemm_nt)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
  void (*gemm_tn)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
  void (*add)(const double*, const double*, double*, std::size_t);
  void (*sub)(const double*, const double*, double*, std::size_t);
  void (*mul)(const double*, const double*, double*, std::size_t);
  void (*scale)(const double*, double, double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  double (*sum)(const double*, std::size_t);
  double (*max_index)(const double*, std::size_t, std::size_t*);
};

constexpr Table kScalarTable = {
    Lane::scalar,         scalar_impl::gemm_nn, scalar_impl::gemm_nt,
    scalar_impl::gemm_tn, scalar_impl::add,     scalar_impl::sub,
    scalar_impl::mul,     scalar_impl::scale,   scalar_impl::axpy,
    scalar_impl::dot,     scalar_impl::sum,     scalar_impl::max_index,
};

#ifdef NMIL_HAVE_AVX2
constexpr Table kAvx2Table = {
    Lane::avx2,         avx2_impl::gemm_nn, avx2_impl::gemm_nt,
    avx2_impl::gemm_tn, avx2_impl::add,     avx2_impl::sub,
    avx2_impl::mul,     avx2_impl::scale,   avx2_impl::axpy,
    avx2_impl::dot,     avx2_impl::sum,     avx2_impl::max_index,
};
#endif

bool cpu_has_avx2() {
#ifdef NMIL_HAVE_AVX2
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Table& table_for(Lane lane) {
#ifdef NMIL_HAVE_AVX2
  if (lane == Lane::avx2) return kAvx2Table;
#endif
  (void)lane;
  return kScalarTable;
}

Lane pick_lane() {
  if (const char* env = std::getenv("NMIL_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return Lane::scalar;
    if (std::strcmp(env, "avx2") == 0) {
      if (!cpu_has_avx2())
        throw ContractError("NMIL_KERNELS=avx2 requested but AVX2+FMA is unavailable");
      return Lane::avx2;
    }
    throw ContractError(std::string("unknown NMIL_KERNELS value: ") + env);
  }
  return cpu_has_avx2() ? Lane::avx2 : Lane::scalar;
}

std::atomic<const Table*> g_table{nullptr};

const Table& active() {
  const Table* t = g_table.load(std::memory_order_acquire);
  if (!t) {
    static const Table* picked = &table_for(pick_lane());  // thread-safe init
    g_table.store(picked, std::memory_order_release);
    t = picked;
  }
  return *t;
}

}  // namespace

Lane active_lane() { return active().lane; }

bool lane_available(Lane lane) {
  return lane == Lane::scalar || (lane == Lane::avx2 && cpu_has_avx2());
}

const char* lane_name(Lane lane) {
  switch (lane) {
    case Lane::scalar:
      return "scalar";
    case Lane::avx2:
      return "avx2";
  }
  return "?";
}

void force_lane(Lane lane) {
  if (!lane_available(lane))
    throw ContractError(std::string("kernel lane unavailable: ") + lane_name(lane));
  g_table.store(&table_for(lane), std::memory_order_release);
}

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  active().gemm_nn(m, k, n, a, b, c, accumulate);
}
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  active().gemm_nt(m, k, n, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c, bool accumulate) {
  active().gemm_tn(m, k, n, a, b, c, accumulate);
}
void add(const double* a, const double* b, double* out, std::size_t n) {
  active().add(a, b, out, n);
}
void sub(const double* a, const double* b, double* out, std::size_t n) {
  active().sub(a, b, out, n);
}
void mul(const double* a, const double* b, double* out, std::size_t n) {
  active().mul(a, b, out, n);
}
void scale(const double* a, double s, double* out, std::size_t n) {
  active().scale(a, s, out, n);
}
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
double sum(const double* a, std::size_t n) { return active().sum(a, n); }
double max_index(const double* a, std::size_t n, std::size_t* arg) {
  return active().max_index(a, n, arg);
}

}  // namespace nmil::kernels
