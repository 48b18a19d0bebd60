// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nmil/tensor.hpp"

// Test-only helpers: finite-difference oracles and naive re-implementations
// kept independent of the library's forward/backward paths.

namespace nmil::testing {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

inline std::vector<double> rand_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline void clear_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.data()->grad.clear();
}

// Largest rel_err between the analytic gradient of build_loss w.r.t. every
// entry of every param and central finite differences with step h.
inline double max_grad_rel_err(std::vector<Tensor>& params,
                               const std::function<Tensor(Graph&)>& build_loss,
                               double h = 1e-5) {
  clear_grads(params);
  Graph g;
  Tensor loss = build_loss(g);
  g.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (Tensor& p : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.size(), 0.0);
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      Graph gp;
      const double fp = build_loss(gp).item();
      vals[i] = orig - h;
      Graph gm;
      const double fm = build_loss(gm).item();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[pi][i], fd));
    }
  }
  return worst;
}

// ---- naive re-implementations (term-by-term, no shared code paths) ---------

inline std::vector<double> naive_matvec(const std::vector<double>& m, std::size_t rows,
                                        std::size_t cols, const std::vector<double>& x) {
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += m[r * cols + c] * x[c];
  return out;
}

// Gated attention by the direct formula with a plain exp/sum softmax.
// v,u are H×M row-major, w is length H; embeddings are rows of length M.
inline std::vector<double> naive_gated_attention(
    const std::vector<std::vector<double>>& embeddings, const std::vector<double>& v,
    const std::vector<double>& u, const std::vector<double>& w, std::size_t h_dim,
    std::size_t m_dim) {
  std::vector<double> logits;
  for (const auto& x : embeddings) {
    const auto vh = naive_matvec(v, h_dim, m_dim, x);
    const auto uh = naive_matvec(u, h_dim, m_dim, x);
    double logit = 0.0;
    for (std::size_t i = 0; i < h_dim; ++i)
      logit += w[i] * std::tanh(vh[i]) * (1.0 / (1.0 + std::exp(-uh[i])));
    logits.push_back(logit);
  }
  double denom = 0.0;
  for (double l : logits) denom += std::exp(l);
  std::vector<double> weights;
  for (double l : logits) weights.push_back(std::exp(l) / denom);
  return weights;
}

}  // namespace nmil::testing
