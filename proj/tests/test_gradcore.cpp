// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "nmil/errors.hpp"
#include "nmil/tensor.hpp"
#include "testing.hpp"

using namespace nmil;
using namespace nmil::testing;

TEST_CASE("tensor construction enforces its invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), DimensionError);
  CHECK_THROWS_AS(Tensor({0}, {}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}, {}), DimensionError);
  CHECK_THROWS_AS(Tensor({}, {}), DimensionError);
  Tensor t({2, 2}, {1, 2, 3, 4});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 2);
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("matmul identity and analytic cases") {
  Graph g;
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor col({2, 1}, {3, 4});
  Tensor r = matmul(g, eye, col);
  CHECK(r.values()[0] == 3.0);
  CHECK(r.values()[1] == 4.0);

  Tensor row({1, 2}, {1, 2});
  Tensor r2 = matmul(g, row, col);
  CHECK(r2.item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Graph g;
  Tensor a({2, 3}, std::vector<double>(6, 1.0));
  Tensor b({4, 2}, std::vector<double>(8, 1.0));
  try {
    matmul(g, a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences on 3x4 · 4x2") {
  std::mt19937_64 rng(1234);
  Tensor a({3, 4}, rand_vec(rng, 12), true);
  Tensor b({4, 2}, rand_vec(rng, 8), true);
  std::vector<Tensor> params = {a, b};
  const double err = max_grad_rel_err(params, [&](Graph& g) {
    return sum_all(g, matmul(g, a, b));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("matmul_nt gradient matches finite differences") {
  std::mt19937_64 rng(77);
  Tensor a({3, 5}, rand_vec(rng, 15), true);
  Tensor b({4, 5}, rand_vec(rng, 20), true);
  std::vector<Tensor> params = {a, b};
  const double err = max_grad_rel_err(params, [&](Graph& g) {
    return sum_all(g, tanh(g, matmul_nt(g, a, b)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise forward values") {
  Graph g;
  Tensor z({1}, {0.0});
  CHECK(tanh(g, z).item() == 0.0);
  CHECK(sigmoid(g, z).item() == 0.5);
  Tensor a({3}, {1, 2, 3});
  Tensor b({3}, {4, 5, 6});
  Tensor h = hadamard(g, a, b);
  CHECK(h.values()[0] == 4.0);
  CHECK(h.values()[1] == 10.0);
  CHECK(h.values()[2] == 18.0);
  CHECK(exp(g, z).item() == 1.0);
  Tensor s = sub(g, a, b);
  CHECK(s.values()[0] == -3.0);
  Tensor sc = scale(g, a, 2.0);
  CHECK(sc.values()[2] == 6.0);
  Tensor neg({2}, {-1.0, 2.0});
  Tensor r = relu(g, neg);
  CHECK(r.values()[0] == 0.0);
  CHECK(r.values()[1] == 2.0);

  Tensor wrong({2}, {1, 2});
  CHECK_THROWS_AS(add(g, a, wrong), DimensionError);
}

TEST_CASE("sigmoid gradient at fixed points matches finite differences") {
  Tensor x({2}, {0.3, -1.2}, true);
  std::vector<Tensor> params = {x};
  const double err =
      max_grad_rel_err(params, [&](Graph& g) { return sum_all(g, sigmoid(g, x)); });
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise gradients match finite differences across seeds") {
  std::mt19937_64 rng(99);
  for (int it = 0; it < 20; ++it) {
    Tensor x({2, 3}, rand_vec(rng, 6, -2.0, 2.0), true);
    Tensor y({2, 3}, rand_vec(rng, 6, -2.0, 2.0), true);
    std::vector<Tensor> params = {x, y};
    auto check = [&](const std::function<Tensor(Graph&)>& f) {
      CHECK(max_grad_rel_err(params, f) < 1e-5);
    };
    check([&](Graph& g) { return sum_all(g, tanh(g, x)); });
    check([&](Graph& g) { return sum_all(g, sigmoid(g, x)); });
    check([&](Graph& g) { return sum_all(g, exp(g, x)); });
    check([&](Graph& g) { return sum_all(g, hadamard(g, x, y)); });
    check([&](Graph& g) { return sum_all(g, add(g, x, y)); });
    check([&](Graph& g) { return sum_all(g, sub(g, x, y)); });
    check([&](Graph& g) { return sum_all(g, scale(g, x, 1.3)); });
    check([&](Graph& g) { return sum_all(g, hadamard(g, sigmoid(g, x), tanh(g, y))); });
  }
}

TEST_CASE("reduce forward semantics") {
  Graph g;
  Tensor v({3}, {2, 4, 6});
  CHECK(reduce_mean(g, v, Axis::rows).item() == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(reduce_sum(g, v, Axis::rows).item() == 12.0);

  Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor rs = reduce_sum(g, m, Axis::rows);
  CHECK(rs.shape() == std::vector<std::size_t>{1, 3});
  CHECK(rs.values()[0] == 5.0);
  Tensor cs = reduce_sum(g, m, Axis::cols);
  CHECK(cs.shape() == std::vector<std::size_t>{2, 1});
  CHECK(cs.values()[1] == 15.0);
}

TEST_CASE("max reduction routes gradient to the lowest tied index") {
  Graph g;
  Tensor v({4}, {1, 5, 5, 2}, true);
  Tensor m = reduce_max(g, v, Axis::rows);
  CHECK(m.item() == 5.0);
  g.backward(m);
  CHECK(v.grad()[0] == 0.0);
  CHECK(v.grad()[1] == 1.0);
  CHECK(v.grad()[2] == 0.0);
  CHECK(v.grad()[3] == 0.0);
}

TEST_CASE("mean gradient over rows of a random 4x3 matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor m({4, 3}, rand_vec(rng, 12), true);
  std::vector<Tensor> params = {m};
  const double err = max_grad_rel_err(params, [&](Graph& g) {
    return sum_all(g, reduce_mean(g, m, Axis::rows));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("reduce and softmax contracts") {
  Graph g;
  Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(reduce_sum(g, Tensor({2}, {1, 2}), Axis::cols), ContractError);
  CHECK_THROWS_AS(softmax(g, m), ContractError);
}

TEST_CASE("softmax values") {
  Graph g;
  for (double c : {0.0, 5.0, -3.25, 1e6}) {
    Tensor v({3}, {c, c, c});
    Tensor s = softmax(g, v);
    for (double w : s.values()) CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-14));
  }
  Tensor single({1}, {123.4});
  CHECK(softmax(g, single).item() == 1.0);

  Tensor two({2}, {0.0, std::log(3.0)});
  Tensor s = softmax(g, two);
  CHECK(s.values()[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(s.values()[1] == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("softmax output sums to one and is shift invariant") {
  std::mt19937_64 rng(17);
  for (int it = 0; it < 200; ++it) {
    const std::size_t n = 1 + it % 9;
    const auto vals = rand_vec(rng, n, -8.0, 8.0);
    Graph g;
    Tensor s = softmax(g, Tensor({n}, vals));
    double total = 0.0;
    for (double w : s.values()) {
      CHECK(w > 0.0);
      CHECK(w <= 1.0);
      total += w;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);

    auto shifted = vals;
    for (double& v : shifted) v += 3.7;
    Tensor s2 = softmax(g, Tensor({n}, shifted));
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(s.values()[i] - s2.values()[i]) <= 1e-12);
  }
}

TEST_CASE("softmax weights are bitwise permutation-equivariant") {
  std::mt19937_64 rng(23);
  for (int it = 0; it < 50; ++it) {
    const std::size_t n = 2 + it % 7;
    const auto vals = rand_vec(rng, n, -5.0, 5.0);
    Graph g;
    Tensor s = softmax(g, Tensor({n}, vals));
    auto perm = vals;
    std::reverse(perm.begin(), perm.end());
    Tensor sp = softmax(g, Tensor({n}, perm));
    for (std::size_t i = 0; i < n; ++i) CHECK(s.values()[i] == sp.values()[n - 1 - i]);
  }
}

TEST_CASE("softmax gradient matches finite differences") {
  std::mt19937_64 rng(31);
  Tensor v({5}, rand_vec(rng, 5, -2.0, 2.0), true);
  Tensor mix({5}, rand_vec(rng, 5), false);
  std::vector<Tensor> params = {v};
  const double err = max_grad_rel_err(params, [&](Graph& g) {
    return sum_all(g, hadamard(g, softmax(g, v), mix));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("bce loss values and gradient") {
  Graph g;
  CHECK(bce_loss(g, Tensor::scalar(0.5), 1.0).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const double eps = kBceEpsilon;
  const double near_zero = bce_loss(g, Tensor::scalar(1.0 - eps), 1.0).item();
  CHECK(std::abs(near_zero - eps) < 1e-9);

  // clamping keeps p=1 finite
  CHECK(std::isfinite(bce_loss(g, Tensor::scalar(1.0), 0.0).item()));

  Tensor p = Tensor::scalar(0.25, true);
  std::vector<Tensor> params = {p};
  const double err =
      max_grad_rel_err(params, [&](Graph& g2) { return bce_loss(g2, p, 0.0); });
  CHECK(err < 1e-6);

  Graph g3;
  Tensor p2 = Tensor::scalar(0.25, true);
  Tensor loss = bce_loss(g3, p2, 0.0);
  g3.backward(loss);
  CHECK(p2.grad()[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));

  CHECK_THROWS_AS(bce_loss(g, Tensor::scalar(0.5), 0.5), ContractError);
}

TEST_CASE("backward fills ones through sum and zeros for detached tensors") {
  Graph g;
  std::mt19937_64 rng(3);
  Tensor x({3, 2}, rand_vec(rng, 6), true);
  Tensor detached({2}, {1.0, 2.0}, true);
  sigmoid(g, detached);  // in the graph, off the loss path
  Tensor loss = sum_all(g, x);
  g.backward(loss);
  for (double v : x.grad()) CHECK(v == 1.0);
  REQUIRE(detached.has_grad());
  for (double v : detached.grad()) CHECK(v == 0.0);
}

TEST_CASE("two-parameter logistic model gradient matches finite differences") {
  std::mt19937_64 rng(8);
  Tensor w({1, 2}, rand_vec(rng, 2), true);
  Tensor b({1, 1}, rand_vec(rng, 1), true);
  Tensor x({2, 1}, rand_vec(rng, 2));
  std::vector<Tensor> params = {w, b};
  const double err = max_grad_rel_err(params, [&](Graph& g) {
    Tensor p = sigmoid(g, add(g, matmul(g, w, x), b));
    return bce_loss(g, p, 1.0);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("backward contract violations") {
  Graph g;
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y = scale(g, x, 2.0);
  CHECK_THROWS_AS(g.backward(y), ContractError);  // non-scalar
  Tensor loss = sum_all(g, y);
  g.backward(loss);
  CHECK_THROWS_AS(g.backward(loss), StateError);  // double backward

  Graph g2;
  CHECK_THROWS_AS(g2.backward(Tensor::scalar(1.0)), ContractError);  // foreign loss
}

TEST_CASE("sgd_step applies updates and resets gradients") {
  Graph g;
  Tensor p = Tensor::scalar(1.0, true);
  Tensor loss = scale(g, p, 0.5);  // dL/dp = 0.5
  g.backward(sum_all(g, loss));
  std::vector<Tensor> params = {p};
  sgd_step(params, 0.1);
  CHECK(p.values()[0] == doctest::Approx(0.95).epsilon(1e-15));
  for (double v : p.grad()) CHECK(v == 0.0);
}

TEST_CASE("sgd_step identities") {
  // lr = 0 leaves parameters unchanged
  Graph g;
  Tensor p = Tensor::scalar(2.5, true);
  g.backward(sum_all(g, scale(g, p, 3.0)));
  std::vector<Tensor> params = {p};
  sgd_step(params, 0.0);
  CHECK(p.values()[0] == 2.5);

  // two steps under a constant gradient equal one step at twice the rate
  auto run = [](int steps, double lr) {
    Tensor q = Tensor::scalar(1.0, true);
    for (int s = 0; s < steps; ++s) {
      q.data()->ensure_grad();
      q.data()->grad[0] = 0.25;
      std::vector<Tensor> ps = {q};
      sgd_step(ps, lr);
    }
    return q.values()[0];
  };
  CHECK(run(2, 0.1) == doctest::Approx(run(1, 0.2)).epsilon(1e-15));

  Tensor fresh = Tensor::scalar(1.0, true);
  std::vector<Tensor> missing = {fresh};
  CHECK_THROWS_AS(sgd_step(missing, 0.1), StateError);
  CHECK_THROWS_AS(sgd_step(missing, -0.1), ContractError);
}

TEST_CASE("structural op gradients match finite differences") {
  std::mt19937_64 rng(44);
  Tensor m({4, 3}, rand_vec(rng, 12), true);
  Tensor r({1, 3}, rand_vec(rng, 3), true);
  Tensor w({4}, rand_vec(rng, 4, 0.1, 1.0), true);
  std::vector<Tensor> params = {m, r, w};
  auto check = [&](const std::function<Tensor(Graph&)>& f) {
    CHECK(max_grad_rel_err(params, f) < 1e-5);
  };
  check([&](Graph& g) { return sum_all(g, add_rowvec(g, m, r)); });
  check([&](Graph& g) { return sum_all(g, tanh(g, add_rowvec(g, m, r))); });
  check([&](Graph& g) { return sum_all(g, scale_rows(g, m, w)); });
  check([&](Graph& g) { return sum_all(g, sigmoid(g, scale_rows(g, m, w))); });
  check([&](Graph& g) { return sum_all(g, slice_rows(g, m, 1, 3)); });
  check([&](Graph& g) {
    std::vector<Tensor> parts = {slice_rows(g, m, 0, 2), slice_rows(g, m, 2, 4)};
    return sum_all(g, tanh(g, concat_rows(g, parts)));
  });
  check([&](Graph& g) { return sum_all(g, reduce_max(g, scale_rows(g, m, w), Axis::rows)); });
}

TEST_CASE("forward ops on finite inputs stay finite") {
  std::mt19937_64 rng(55);
  for (int it = 0; it < 25; ++it) {
    Graph g;
    Tensor a({3, 4}, rand_vec(rng, 12, -30.0, 30.0));
    Tensor b({4, 2}, rand_vec(rng, 8, -30.0, 30.0));
    Tensor c = tanh(g, matmul(g, a, b));
    Tensor ones({2, 1}, {1.0, 1.0});
    Tensor s = softmax(g, matmul(g, c, ones));
    Tensor out = sigmoid(g, reduce_mean(g, s, Axis::rows));
    for (double v : out.values()) CHECK(std::isfinite(v));
    for (double v : s.values()) CHECK(std::isfinite(v));
  }
}
