// SPDX-License-Identifier: Apache-2.0

#include "nmil/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "nmil/errors.hpp"
#include "nmil/kernels.hpp"

namespace nmil {

namespace {

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2)
    throw DimensionError(std::string(what) + " requires a rank-2 tensor, got " +
                         shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
}

Tensor make_output(std::vector<std::size_t> shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.data()->op_output = true;
  return t;
}

using Data = std::shared_ptr<detail::TensorData>;

// dst += g ⊙ other
void acc_mul(std::vector<double>& dst, std::span<const double> g,
             std::span<const double> other) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * other[i];
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values,
               bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  std::size_t total = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    total *= e;
  }
  if (total != values.size())
    throw DimensionError("shape " + shape_str(shape) + " expects " + std::to_string(total) +
                         " values, got " + std::to_string(values.size()));
  d_ = std::make_shared<detail::TensorData>();
  d_->shape = std::move(shape);
  d_->values = std::move(values);
  d_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::size_t total = 1;
  for (std::size_t e : shape) total *= e;
  return Tensor(std::move(shape), std::vector<double>(total, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  std::size_t total = 1;
  for (std::size_t e : shape) total *= e;
  return Tensor(std::move(shape), std::vector<double>(total, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return d_->shape[0];
  if (rank() == 2) return d_->shape[0];
  throw ContractError("rows() requires rank <= 2, got " + shape_str(d_->shape));
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return 1;
  if (rank() == 2) return d_->shape[1];
  throw ContractError("cols() requires rank <= 2, got " + shape_str(d_->shape));
}

bool Tensor::is_vector() const {
  return rank() == 1 || (rank() == 2 && (d_->shape[0] == 1 || d_->shape[1] == 1));
}

double Tensor::item() const {
  if (size() != 1)
    throw ContractError("item() requires a scalar tensor, got " + shape_str(d_->shape));
  return d_->values[0];
}

void Graph::record(std::shared_ptr<detail::TensorData> out, std::function<void()> backprop) {
  if (ran_backward_) throw StateError("graph already consumed by backward");
  nodes_.push_back(Node{std::move(out), std::move(backprop)});
}

void Graph::backward(const Tensor& loss) {
  if (ran_backward_) throw StateError("backward already ran on this graph");
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward requires a scalar loss");
  bool found = false;
  for (const auto& node : nodes_)
    if (node.out.get() == loss.data()) {
      found = true;
      break;
    }
  if (!found) throw ContractError("loss tensor was not produced by this graph");
  ran_backward_ = true;
  loss.data()->ensure_grad();
  loss.data()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backprop();
}

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  kernels::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
  Tensor res = make_output({m, n}, std::move(out));
  Data ad = a.ptr(), bd = b.ptr(), od = res.ptr();
  g.record(od, [ad, bd, od, m, k, n]() {
    od->ensure_grad();
    const double* gv = od->grad.data();
    if (ad->wants_grad()) {
      ad->ensure_grad();
      kernels::gemm_nt(m, n, k, gv, bd->values.data(), ad->grad.data(), true);
    }
    if (bd->wants_grad()) {
      bd->ensure_grad();
      kernels::gemm_tn(k, m, n, ad->values.data(), gv, bd->grad.data(), true);
    }
  });
  return res;
}

Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: contraction extents of " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n);
  kernels::gemm_nt(m, k, n, a.values().data(), b.values().data(), out.data());
  Tensor res = make_output({m, n}, std::move(out));
  Data ad = a.ptr(), bd = b.ptr(), od = res.ptr();
  g.record(od, [ad, bd, od, m, k, n]() {
    od->ensure_grad();
    const double* gv = od->grad.data();
    if (ad->wants_grad()) {
      ad->ensure_grad();
      kernels::gemm_nn(m, n, k, gv, bd->values.data(), ad->grad.data(), true);
    }
    if (bd->wants_grad()) {
      bd->ensure_grad();
      kernels::gemm_tn(n, m, k, gv, ad->values.data(), bd->grad.data(), true);
    }
  });
  return res;
}

namespace {

template <typename Combine, typename BackA, typename BackB>
Tensor binary_ew(Graph& g, const Tensor& a, const Tensor& b, const char* name,
                 Combine combine, BackA back_a, BackB back_b) {
  require_same_shape(a, b, name);
  std::vector<double> out(a.size());
  combine(a.values().data(), b.values().data(), out.data(), out.size());
  Tensor res = make_output(a.shape(), std::move(out));
  Data ad = a.ptr(), bd = b.ptr(), od = res.ptr();
  g.record(od, [ad, bd, od, back_a, back_b]() {
    od->ensure_grad();
    if (ad->wants_grad()) {
      ad->ensure_grad();
      back_a(*ad, *bd, od->grad);
    }
    if (bd->wants_grad()) {
      bd->ensure_grad();
      back_b(*ad, *bd, od->grad);
    }
  });
  return res;
}

using TD = detail::TensorData;

}  // namespace

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  return binary_ew(
      g, a, b, "add", kernels::add,
      [](TD& ad, TD&, const std::vector<double>& gv) {
        kernels::axpy(1.0, gv.data(), ad.grad.data(), gv.size());
      },
      [](TD&, TD& bd, const std::vector<double>& gv) {
        kernels::axpy(1.0, gv.data(), bd.grad.data(), gv.size());
      });
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
  return binary_ew(
      g, a, b, "sub", kernels::sub,
      [](TD& ad, TD&, const std::vector<double>& gv) {
        kernels::axpy(1.0, gv.data(), ad.grad.data(), gv.size());
      },
      [](TD&, TD& bd, const std::vector<double>& gv) {
        kernels::axpy(-1.0, gv.data(), bd.grad.data(), gv.size());
      });
}

Tensor hadamard(Graph& g, const Tensor& a, const Tensor& b) {
  return binary_ew(
      g, a, b, "hadamard", kernels::mul,
      [](TD& ad, TD& bd, const std::vector<double>& gv) { acc_mul(ad.grad, gv, bd.values); },
      [](TD& ad, TD& bd, const std::vector<double>& gv) { acc_mul(bd.grad, gv, ad.values); });
}

Tensor scale(Graph& g, const Tensor& t, double s) {
  std::vector<double> out(t.size());
  kernels::scale(t.values().data(), s, out.data(), out.size());
  Tensor res = make_output(t.shape(), std::move(out));
  Data td = t.ptr(), od = res.ptr();
  g.record(od, [td, od, s]() {
    od->ensure_grad();
    if (!td->wants_grad()) return;
    td->ensure_grad();
    kernels::axpy(s, od->grad.data(), td->grad.data(), od->grad.size());
  });
  return res;
}

namespace {

// dfn(out_value, in_value) -> local derivative
template <typename Fn, typename Dfn>
Tensor unary_ew(Graph& g, const Tensor& t, Fn fn, Dfn dfn) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(t.values()[i]);
  Tensor res = make_output(t.shape(), std::move(out));
  Data td = t.ptr(), od = res.ptr();
  g.record(od, [td, od, dfn]() {
    od->ensure_grad();
    if (!td->wants_grad()) return;
    td->ensure_grad();
    for (std::size_t i = 0; i < od->grad.size(); ++i)
      td->grad[i] += od->grad[i] * dfn(od->values[i], td->values[i]);
  });
  return res;
}

}  // namespace

Tensor tanh(Graph& g, const Tensor& t) {
  return unary_ew(
      g, t, [](double v) { return std::tanh(v); },
      [](double o, double) { return 1.0 - o * o; });
}

Tensor sigmoid(Graph& g, const Tensor& t) {
  return unary_ew(
      g, t, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double o, double) { return o * (1.0 - o); });
}

Tensor exp(Graph& g, const Tensor& t) {
  return unary_ew(
      g, t, [](double v) { return std::exp(v); }, [](double o, double) { return o; });
}

Tensor relu(Graph& g, const Tensor& t) {
  return unary_ew(
      g, t, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double, double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor add_rowvec(Graph& g, const Tensor& m, const Tensor& r) {
  require_rank2(m, "add_rowvec");
  if (!r.is_vector() || r.size() != m.cols())
    throw DimensionError("add_rowvec: row vector " + shape_str(r.shape()) +
                         " does not match matrix " + shape_str(m.shape()));
  const std::size_t rows = m.rows(), n = m.cols();
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < rows; ++i)
    kernels::add(m.values().data() + i * n, r.values().data(), out.data() + i * n, n);
  Tensor res = make_output(m.shape(), std::move(out));
  Data md = m.ptr(), rd = r.ptr(), od = res.ptr();
  g.record(od, [md, rd, od, rows, n]() {
    od->ensure_grad();
    if (md->wants_grad()) {
      md->ensure_grad();
      kernels::axpy(1.0, od->grad.data(), md->grad.data(), od->grad.size());
    }
    if (rd->wants_grad()) {
      rd->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        kernels::axpy(1.0, od->grad.data() + i * n, rd->grad.data(), n);
    }
  });
  return res;
}

Tensor scale_rows(Graph& g, const Tensor& m, const Tensor& w) {
  require_rank2(m, "scale_rows");
  if (!w.is_vector() || w.size() != m.rows())
    throw DimensionError("scale_rows: weight vector " + shape_str(w.shape()) +
                         " does not match matrix " + shape_str(m.shape()));
  const std::size_t rows = m.rows(), n = m.cols();
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < rows; ++i)
    kernels::scale(m.values().data() + i * n, w.values()[i], out.data() + i * n, n);
  Tensor res = make_output(m.shape(), std::move(out));
  Data md = m.ptr(), wd = w.ptr(), od = res.ptr();
  g.record(od, [md, wd, od, rows, n]() {
    od->ensure_grad();
    if (md->wants_grad()) {
      md->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        kernels::axpy(wd->values[i], od->grad.data() + i * n, md->grad.data() + i * n, n);
    }
    if (wd->wants_grad()) {
      wd->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        wd->grad[i] += kernels::dot(od->grad.data() + i * n, md->values.data() + i * n, n);
    }
  });
  return res;
}

Tensor slice_rows(Graph& g, const Tensor& m, std::size_t r0, std::size_t r1) {
  require_rank2(m, "slice_rows");
  if (r0 >= r1 || r1 > m.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") invalid for " + shape_str(m.shape()));
  const std::size_t n = m.cols(), rows = r1 - r0;
  std::vector<double> out(rows * n);
  std::memcpy(out.data(), m.values().data() + r0 * n, rows * n * sizeof(double));
  Tensor res = make_output({rows, n}, std::move(out));
  Data md = m.ptr(), od = res.ptr();
  g.record(od, [md, od, r0, rows, n]() {
    od->ensure_grad();
    if (!md->wants_grad()) return;
    md->ensure_grad();
    kernels::axpy(1.0, od->grad.data(), md->grad.data() + r0 * n, rows * n);
  });
  return res;
}

Tensor concat_rows(Graph& g, std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n)
      throw DimensionError("concat_rows: column extents differ (" + std::to_string(n) +
                           " vs " + std::to_string(p.cols()) + ")");
    rows += p.rows();
  }
  std::vector<double> out(rows * n);
  std::size_t off = 0;
  std::vector<Data> pds;
  pds.reserve(parts.size());
  for (const Tensor& p : parts) {
    std::memcpy(out.data() + off, p.values().data(), p.size() * sizeof(double));
    off += p.size();
    pds.push_back(p.ptr());
  }
  Tensor res = make_output({rows, n}, std::move(out));
  Data od = res.ptr();
  g.record(od, [pds, od]() {
    od->ensure_grad();
    std::size_t off = 0;
    for (const Data& pd : pds) {
      if (pd->wants_grad()) {
        pd->ensure_grad();
        kernels::axpy(1.0, od->grad.data() + off, pd->grad.data(), pd->values.size());
      }
      off += pd->values.size();
    }
  });
  return res;
}

namespace {

enum class Reduce { sum, mean, max };

Tensor reduce_impl(Graph& g, const Tensor& t, Axis axis, Reduce op) {
  if (t.rank() > 2) throw ContractError("reduce supports rank <= 2, got rank " +
                                        std::to_string(t.rank()));
  if (t.rank() == 1 && axis != Axis::rows)
    throw ContractError("reduce over a rank-1 tensor requires the row axis");

  // rank-1 [n] reduces like an n×1 column over rows
  const bool vector_in = t.rank() == 1;
  const std::size_t rows = vector_in ? t.shape()[0] : t.shape()[0];
  const std::size_t cols = vector_in ? 1 : t.shape()[1];
  const bool over_rows = axis == Axis::rows;
  const std::size_t extent = over_rows ? rows : cols;   // reduced extent
  const std::size_t kept = over_rows ? cols : rows;     // surviving extent

  std::vector<double> out(kept, 0.0);
  std::vector<std::size_t> argmax(op == Reduce::max ? kept : 0);
  const auto* v = t.values().data();
  auto elem = [&](std::size_t r, std::size_t c) { return v[r * cols + c]; };

  for (std::size_t o = 0; o < kept; ++o) {
    if (op == Reduce::max) {
      std::size_t best = 0;
      double bv = over_rows ? elem(0, o) : elem(o, 0);
      for (std::size_t e = 1; e < extent; ++e) {
        const double x = over_rows ? elem(e, o) : elem(o, e);
        if (x > bv) {
          bv = x;
          best = e;
        }
      }
      out[o] = bv;
      argmax[o] = best;
    } else {
      double s = 0.0;
      for (std::size_t e = 0; e < extent; ++e) s += over_rows ? elem(e, o) : elem(o, e);
      out[o] = op == Reduce::mean ? s / static_cast<double>(extent) : s;
    }
  }

  std::vector<std::size_t> oshape;
  if (vector_in)
    oshape = {1};
  else if (over_rows)
    oshape = {1, cols};
  else
    oshape = {rows, 1};
  Tensor res = make_output(std::move(oshape), std::move(out));
  Data td = t.ptr(), od = res.ptr();
  g.record(od, [td, od, op, over_rows, extent, kept, cols, argmax = std::move(argmax)]() {
    od->ensure_grad();
    if (!td->wants_grad()) return;
    td->ensure_grad();
    auto idx = [&](std::size_t e, std::size_t o) {
      return over_rows ? e * cols + o : o * cols + e;
    };
    for (std::size_t o = 0; o < kept; ++o) {
      const double gv = od->grad[o];
      switch (op) {
        case Reduce::sum:
          for (std::size_t e = 0; e < extent; ++e) td->grad[idx(e, o)] += gv;
          break;
        case Reduce::mean:
          for (std::size_t e = 0; e < extent; ++e)
            td->grad[idx(e, o)] += gv / static_cast<double>(extent);
          break;
        case Reduce::max:
          td->grad[idx(argmax[o], o)] += gv;
          break;
      }
    }
  });
  return res;
}

}  // namespace

Tensor reduce_sum(Graph& g, const Tensor& t, Axis axis) {
  return reduce_impl(g, t, axis, Reduce::sum);
}
Tensor reduce_mean(Graph& g, const Tensor& t, Axis axis) {
  return reduce_impl(g, t, axis, Reduce::mean);
}
Tensor reduce_max(Graph& g, const Tensor& t, Axis axis) {
  return reduce_impl(g, t, axis, Reduce::max);
}

Tensor sum_all(Graph& g, const Tensor& t) {
  Tensor res = make_output({1}, {kernels::sum(t.values().data(), t.size())});
  Data td = t.ptr(), od = res.ptr();
  g.record(od, [td, od]() {
    od->ensure_grad();
    if (!td->wants_grad()) return;
    td->ensure_grad();
    const double gv = od->grad[0];
    for (double& d : td->grad) d += gv;
  });
  return res;
}

Tensor softmax(Graph& g, const Tensor& v) {
  if (!v.is_vector())
    throw ContractError("softmax requires a vector, got " + shape_str(v.shape()));
  const std::size_t n = v.size();
  std::size_t arg = 0;
  const double mx = kernels::max_index(v.values().data(), n, &arg);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(v.values()[i] - mx);
  // value-ordered summation keeps weights bitwise invariant under member
  // permutation (required for exact max-pooling invariance downstream)
  std::vector<double> sorted(out);
  std::sort(sorted.begin(), sorted.end());
  double denom = 0.0;
  for (double e : sorted) denom += e;
  for (double& o : out) o /= denom;
  Tensor res = make_output(v.shape(), std::move(out));
  Data vd = v.ptr(), od = res.ptr();
  g.record(od, [vd, od]() {
    od->ensure_grad();
    if (!vd->wants_grad()) return;
    vd->ensure_grad();
    double s = 0.0;
    for (std::size_t i = 0; i < od->values.size(); ++i) s += od->grad[i] * od->values[i];
    for (std::size_t i = 0; i < od->values.size(); ++i)
      vd->grad[i] += od->values[i] * (od->grad[i] - s);
  });
  return res;
}

Tensor bce_loss(Graph& g, const Tensor& p, double label) {
  if (p.size() != 1) throw ContractError("bce_loss expects a scalar probability");
  if (label != 0.0 && label != 1.0) throw ContractError("bce_loss label must be 0 or 1");
  const double raw = p.values()[0];
  const double pc = std::clamp(raw, kBceEpsilon, 1.0 - kBceEpsilon);
  const double loss = -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
  Tensor res = make_output({1}, {loss});
  Data pd = p.ptr(), od = res.ptr();
  const bool clamped = raw < kBceEpsilon || raw > 1.0 - kBceEpsilon;
  g.record(od, [pd, od, label, pc, clamped]() {
    od->ensure_grad();
    if (!pd->wants_grad()) return;
    pd->ensure_grad();
    if (!clamped) pd->grad[0] += od->grad[0] * (pc - label) / (pc * (1.0 - pc));
  });
  return res;
}

void sgd_step(std::span<Tensor> params, double lr) {
  if (lr < 0.0) throw ContractError("sgd_step: learning rate must be non-negative");
  for (const Tensor& p : params)
    if (!p.has_grad())
      throw StateError("sgd_step: parameter of shape " + shape_str(p.shape()) +
                       " has no gradient");
  for (Tensor& p : params) {
    auto* d = p.data();
    kernels::axpy(-lr, d->grad.data(), d->values.data(), d->values.size());
    std::fill(d->grad.begin(), d->grad.end(), 0.0);
  }
}

}  // namespace nmil
