// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

// Reverse-mode autodiff over dense row-major f64 tensors. Graphs are built
// per forward pass (define-by-run) and replayed once in reverse; parameter
// tensors outlive any graph and accumulate gradients across ops until
// sgd_step() consumes them.

namespace nmil {

namespace detail {

struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;
  bool op_output = false;

  bool wants_grad() const { return requires_grad || op_output; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> values,
         bool requires_grad = false);

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->values.size(); }

  // rank-1 tensors count as a single column
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_vector() const;  // rank 1, or rank 2 with a unit extent

  std::span<const double> values() const { return d_->values; }
  std::span<double> values() { return d_->values; }
  std::span<const double> grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  bool requires_grad() const { return d_->requires_grad; }

  double item() const;  // scalar fetch; ContractError unless size()==1
  double at(std::size_t r, std::size_t c) const { return d_->values[r * cols() + c]; }

  detail::TensorData* data() const { return d_.get(); }
  const std::shared_ptr<detail::TensorData>& ptr() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Seeds d(loss)/d(loss)=1 and replays all recorded ops in reverse. Every
  // requires_grad tensor touched by the graph ends up with a populated grad
  // (zero if detached from the loss). A second call is rejected.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

  // op implementations only
  void record(std::shared_ptr<detail::TensorData> out, std::function<void()> backprop);

 private:
  struct Node {
    std::shared_ptr<detail::TensorData> out;
    std::function<void()> backprop;
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ---- operations -----------------------------------------------------------

// c = a·b, rank-2 only.
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
// c = a·bᵀ (b stored n×k); the natural layout for the H×M attention matrices.
Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b);

// elementwise; shapes must match exactly
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor hadamard(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& t, double s);
Tensor tanh(Graph& g, const Tensor& t);
Tensor sigmoid(Graph& g, const Tensor& t);
Tensor exp(Graph& g, const Tensor& t);
Tensor relu(Graph& g, const Tensor& t);

// m + row broadcast over every row of m; r is 1×n or [n]
Tensor add_rowvec(Graph& g, const Tensor& m, const Tensor& r);

// Row i of m scaled by w[i]; w is [rows] or rows×1.
Tensor scale_rows(Graph& g, const Tensor& m, const Tensor& w);

// Contiguous row range [r0, r1) of a rank-2 tensor.
Tensor slice_rows(Graph& g, const Tensor& m, std::size_t r0, std::size_t r1);

// Stack rank-2 pieces with equal column counts.
Tensor concat_rows(Graph& g, std::span<const Tensor> parts);

enum class Axis : int { rows = 0, cols = 1 };

// Reductions. Rank-1 input reduces to a scalar (axis must be rows); rank-2
// input keeps the reduced axis with extent 1. Max routes its gradient to the
// lowest index attaining the maximum.
Tensor reduce_sum(Graph& g, const Tensor& t, Axis axis);
Tensor reduce_mean(Graph& g, const Tensor& t, Axis axis);
Tensor reduce_max(Graph& g, const Tensor& t, Axis axis);

// Sum of every element, as a scalar.
Tensor sum_all(Graph& g, const Tensor& t);

// Numerically stable softmax over the entries of a vector. The denominator is
// summed in value order, so weights are bitwise invariant under permutation
// of the input entries.
Tensor softmax(Graph& g, const Tensor& v);

// −(y·ln p + (1−y)·ln(1−p)) with p clamped into [ε, 1−ε], ε = 1e-7. No
// gradient flows when the clamp is active.
Tensor bce_loss(Graph& g, const Tensor& p, double label);

inline constexpr double kBceEpsilon = 1e-7;

// param ← param − lr·grad for every param, then grads are reset to zero.
// Missing grads are a StateError; negative lr a ContractError.
void sgd_step(std::span<Tensor> params, double lr);

}  // namespace nmil
