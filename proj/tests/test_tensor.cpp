#include <catch2/catch_amalgamated.hpp>

#include "canon3d/rng.hpp"
#include "canon3d/tensor.hpp"

using namespace canon3d;

namespace {

Tensor random_tensor(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.v) v = scale * rng.normal();
  return t;
}

// Finite-difference harness for one graph-builder: the builder maps leaf
// ids to a scalar node. Returns the grad_check error over all params.
template <typename Builder>
double check_builder(Builder&& build, std::vector<Tensor>& params,
                     double eps = 1e-5) {
  auto loss_fn = [&](const std::vector<Tensor>& p) {
    Graph g;
    std::vector<int> ids;
    for (const auto& t : p) ids.push_back(g.leaf(t, true));
    return g.val(build(g, ids)).v[0];
  };
  auto grads_fn = [&](const std::vector<Tensor>& p, std::vector<Tensor>& grads) {
    Graph g;
    std::vector<int> ids;
    for (const auto& t : p) ids.push_back(g.leaf(t, true));
    g.backward(build(g, ids));
    for (size_t i = 0; i < ids.size(); ++i) grads[i] = g.grad(ids[i]);
  };
  return grad_check(loss_fn, grads_fn, params, eps);
}

// Reduce any tensor to a scalar through a fixed weighting so per-op tests
// exercise non-uniform output gradients.
int weighted_sum(Graph& g, int x, Rng& rng) {
  Tensor w(g.rows(x), g.cols(x));
  for (double& v : w.v) v = rng.normal();
  return g.dot_all(x, g.constant(std::move(w)));
}

}  // namespace

TEST_CASE("matmul identity and shape errors") {
  Graph g;
  Tensor eye(3, 3);
  eye.at(0, 0) = eye.at(1, 1) = eye.at(2, 2) = 1.0;
  Rng rng(1);
  Tensor m = random_tensor(3, 3, rng);
  int out = g.matmul(g.constant(eye), g.constant(m));
  for (size_t i = 0; i < m.size(); ++i) REQUIRE(g.val(out).v[i] == m.v[i]);

  REQUIRE_THROWS_WITH(g.matmul(g.constant(Tensor(2, 3)), g.constant(Tensor(2, 3))),
                      Catch::Matchers::ContainsSubstring("matmul") &&
                          Catch::Matchers::ContainsSubstring("2x3"));
}

TEST_CASE("softmax of a constant row is uniform") {
  Graph g;
  int s = g.softmax_rows(g.constant(Tensor(1, 3)));
  for (int j = 0; j < 3; ++j)
    REQUIRE(std::abs(g.val(s).v[j] - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("mean centering matches the hand example") {
  Graph g;
  Tensor x(2, 3);
  x.at(0, 0) = 1.0;
  x.at(1, 0) = 3.0;
  int c = g.mean_center_rows(g.constant(x));
  REQUIRE(g.val(c).at(0, 0) == -1.0);
  REQUIRE(g.val(c).at(1, 0) == 1.0);
  REQUIRE(g.val(c).at(0, 1) == 0.0);
}

TEST_CASE("backward of x*x at 3 gives 6") {
  Graph g;
  int x = g.leaf(Tensor::scalar(3.0), true);
  g.backward(g.mul(x, x));
  REQUIRE(g.grad(x).v[0] == 6.0);
}

TEST_CASE("backward of sum(relu(v)) masks negative entries") {
  Graph g;
  Tensor v(2, 1);
  v.v = {-1.0, 2.0};
  int x = g.leaf(v, true);
  g.backward(g.sum_all(g.relu(x)));
  REQUIRE(g.grad(x).v[0] == 0.0);
  REQUIRE(g.grad(x).v[1] == 1.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph g;
  int x = g.leaf(Tensor(2, 2), true);
  REQUIRE_THROWS_AS(g.backward(x), error);
}

TEST_CASE("least squares gradient matches finite differences") {
  Rng rng(2);
  Tensor a = random_tensor(4, 3, rng), b = random_tensor(4, 1, rng);
  std::vector<Tensor> params = {random_tensor(3, 1, rng)};
  double err = check_builder(
      [&](Graph& g, const std::vector<int>& ids) {
        int r = g.sub(g.matmul(g.constant(a), ids[0]), g.constant(b));
        return g.squared_sum(r);
      },
      params);
  REQUIRE(err < 1e-6);
}

TEST_CASE("quadratic gradient is near-exact") {
  Rng rng(3);
  std::vector<Tensor> params = {random_tensor(5, 1, rng)};
  double err = check_builder(
      [&](Graph& g, const std::vector<int>& ids) {
        return g.squared_sum(ids[0]);
      },
      params);
  REQUIRE(err < 1e-9);
}

TEST_CASE("shared subexpressions accumulate like the expanded graph") {
  Rng rng(4);
  Tensor x0 = random_tensor(3, 3, rng);
  Graph g1;
  int x1 = g1.leaf(x0, true);
  int s1 = g1.add(x1, x1);  // shared operand
  g1.backward(g1.squared_sum(s1));
  Graph g2;
  int x2 = g2.leaf(x0, true);
  int s2 = g2.add(x2, g2.scale(x2, 1.0));  // structurally unshared
  g2.backward(g2.squared_sum(s2));
  for (size_t i = 0; i < x0.size(); ++i)
    REQUIRE(g1.grad(x1).v[i] == Catch::Approx(g2.grad(x2).v[i]).epsilon(1e-14));
}

TEST_CASE("every op passes finite differences over 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    // Nudge away from relu/abs/max kinks so central differences are valid.
    auto nudged = [&](int r, int c) {
      Tensor t = random_tensor(r, c, rng);
      for (double& v : t.v)
        if (std::abs(v) < 1e-3) v += (v >= 0 ? 2e-3 : -2e-3);
      return t;
    };

    struct OpCase {
      const char* name;
      std::function<int(Graph&, const std::vector<int>&, Rng&)> build;
      std::vector<Tensor> params;
    };
    std::vector<OpCase> cases;
    cases.push_back({"add+scale",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.add(g.scale(p[0], 1.7), p[1]), r);
                     },
                     {nudged(3, 4), nudged(3, 4)}});
    cases.push_back({"sub/mul/div",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       int d = g.div(p[0], g.add_scalar(g.mul(p[1], p[1]), 1.0));
                       return weighted_sum(g, g.sub(d, p[1]), r);
                     },
                     {nudged(2, 5), nudged(2, 5)}});
    cases.push_back({"matmul/transpose",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.matmul(p[0], g.transpose(p[1])), r);
                     },
                     {nudged(3, 4), nudged(2, 4)}});
    cases.push_back({"concat_rows/cols",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       int cr = g.concat_rows({p[0], p[1]});
                       return weighted_sum(g, g.concat_cols({cr, cr}), r);
                     },
                     {nudged(2, 3), nudged(4, 3)}});
    cases.push_back({"gather_rows with repeats",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.gather_rows(p[0], {2, 0, 2, 1}), r);
                     },
                     {nudged(4, 3)}});
    cases.push_back({"row/col reductions",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       int a = weighted_sum(g, g.row_sum(p[0]), r);
                       int b = weighted_sum(g, g.row_mean(p[0]), r);
                       int c = weighted_sum(g, g.col_sum(p[0]), r);
                       return g.add(a, g.add(b, c));
                     },
                     {nudged(4, 3)}});
    cases.push_back({"sum/mean_all",
                     [](Graph& g, const std::vector<int>& p, Rng&) {
                       return g.add(g.sum_all(p[0]), g.mean_all(p[0]));
                     },
                     {nudged(3, 3)}});
    cases.push_back({"rows_l2norm",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.rows_l2norm(p[0]), r);
                     },
                     {nudged(5, 3)}});
    cases.push_back({"squared_sum/dot/abs",
                     [](Graph& g, const std::vector<int>& p, Rng&) {
                       int a = g.squared_sum(p[0]);
                       int b = g.dot_all(p[0], p[1]);
                       return g.add(a, g.add(b, g.abs_sum(p[1])));
                     },
                     {nudged(3, 4), nudged(3, 4)}});
    cases.push_back({"relu/clamp_min",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.relu(g.clamp_min(p[0], -0.5)), r);
                     },
                     {nudged(4, 4)}});
    cases.push_back({"sqrt of positives",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(
                           g, g.sqrt_elem(g.add_scalar(g.mul(p[0], p[0]), 0.5)), r);
                     },
                     {nudged(3, 3)}});
    cases.push_back({"softmax_rows",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.softmax_rows(p[0]), r);
                     },
                     {nudged(4, 5)}});
    cases.push_back({"mean_center_rows",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.mean_center_rows(p[0]), r);
                     },
                     {nudged(6, 3)}});
    cases.push_back({"row/col broadcasts",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       int a = g.add_rowvec(p[0], p[1]);
                       int b = g.add_colvec(a, p[2]);
                       int c = g.div_rowvec(b, g.add_scalar(g.mul(p[1], p[1]), 1.0));
                       return weighted_sum(g, c, r);
                     },
                     {nudged(4, 3), nudged(1, 3), nudged(4, 1)}});
    cases.push_back({"block_linear",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       Rng wr(7);
                       Tensor a = random_tensor(2, 3, wr);
                       return weighted_sum(g, g.block_linear(p[0], a), r);
                     },
                     {nudged(12, 4)}});  // 4 blocks of 3 rows
    cases.push_back({"max_blocks",
                     [](Graph& g, const std::vector<int>& p, Rng& r) {
                       return weighted_sum(g, g.max_blocks(p[0], 3), r);
                     },
                     {nudged(12, 4)}});

    for (auto& c : cases) {
      Rng wrng(seed * 977 + 13);
      double err = check_builder(
          [&](Graph& g, const std::vector<int>& ids) {
            Rng local = wrng;  // identical weights across FD evaluations
            return c.build(g, ids, local);
          },
          c.params);
      INFO("op " << c.name << " seed " << seed);
      REQUIRE(err < 1e-4);
    }
  }
}

TEST_CASE("max_blocks takes per-direction max over point blocks") {
  Graph g;
  // 2 points x 2 dirs x 3 cols
  Tensor x(4, 3);
  // point 0
  x.at(0, 0) = 1;  x.at(0, 1) = 5;  x.at(0, 2) = 0;
  x.at(1, 0) = 2;  x.at(1, 1) = 0;  x.at(1, 2) = 7;
  // point 1
  x.at(2, 0) = 3;  x.at(2, 1) = 4;  x.at(2, 2) = 1;
  x.at(3, 0) = 0;  x.at(3, 1) = 9;  x.at(3, 2) = 2;
  int m = g.max_blocks(g.constant(x), 2);
  REQUIRE(g.val(m).at(0, 0) == 3);
  REQUIRE(g.val(m).at(0, 1) == 5);
  REQUIRE(g.val(m).at(1, 1) == 9);
  REQUIRE(g.val(m).at(1, 2) == 7);
}
