#include <doctest.h>

#include <cmath>
#include <random>
#include <string>

#include "treediff/nn/layers.hpp"

using namespace treediff;
using namespace treediff::nn;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(r, c);
  for (auto& x : t.values()) x = n(rng);
  return t;
}

// Weighted sum so every output coordinate matters with a different coefficient.
Var probe(Tape& t, Var v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& val = t.value(v);
  return sum(t, mul(t, v, t.constant(random_tensor(val.rows(), val.cols(), rng))));
}

GraphBatch two_graph_batch() {
  GraphBatch b;
  const int g1[] = {1, 0, 2, 1, 0, 1};  // 4 nodes
  const int g2[] = {2, 1, 0};           // 3 nodes
  b.append(4, g1);
  b.append(3, g2);
  return b;
}

}  // namespace

TEST_CASE("tensor shape and data must agree") {
  CHECK_THROWS_AS(Tensor(2, 3, std::vector<double>(5)), ContractViolation);
  Tensor t(2, 3, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  t(1, 2) = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("param store keeps gradient and moment slots shaped like the value") {
  ParamStore ps;
  std::mt19937_64 rng(1);
  ps.add("w", glorot(3, 5, rng));
  ps.add("b", Tensor(1, 5));
  for (const auto& p : ps) {
    CHECK(p.grad.same_shape(p.value));
    CHECK(p.first_moment.same_shape(p.value));
    CHECK(p.second_moment.same_shape(p.value));
  }
  CHECK(ps.count() == 20);
  CHECK(ps.index("b") == 1);
  CHECK_THROWS(ps.add("w", Tensor(1, 1)));
}

TEST_CASE("glorot draws stay inside the uniform limit") {
  std::mt19937_64 rng(3);
  const Tensor w = glorot(10, 6, rng);
  const double limit = std::sqrt(6.0 / 16.0);
  for (double x : w.values()) CHECK(std::abs(x) <= limit);
}

TEST_CASE("forward_dense examples") {
  ParamStore ps;
  std::mt19937_64 rng(0);
  Dense d = make_dense(ps, "d", 3, 3, Activation::Identity, rng);
  Tensor eye(3, 3);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  ps[d.weight].value = eye;
  ps[d.bias].value.fill(0.0);
  const Tensor x(2, 3, std::vector<double>{1, -2, 3, 0.5, 0, 7});
  CHECK(forward_dense(ps, d, x) == x);

  ps[d.weight].value.fill(0.0);
  ps[d.bias].value = Tensor(1, 3, std::vector<double>{4, 5, 6});
  const Tensor y = forward_dense(ps, d, x);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(y(r, 0) == 4.0);
    CHECK(y(r, 1) == 5.0);
    CHECK(y(r, 2) == 6.0);
  }

  // 3x2 weight multiplied out by hand.
  Dense e = make_dense(ps, "e", 3, 2, Activation::Identity, rng);
  ps[e.weight].value = Tensor(3, 2, std::vector<double>{1, 2, -1, 0.5, 3, -2});
  ps[e.bias].value = Tensor(1, 2, std::vector<double>{0.25, -0.25});
  const Tensor xi(1, 3, std::vector<double>{2, 4, -1});
  const Tensor out = forward_dense(ps, e, xi);
  CHECK(out(0, 0) == doctest::Approx(2 * 1 + 4 * -1 + -1 * 3 + 0.25));
  CHECK(out(0, 1) == doctest::Approx(2 * 2 + 4 * 0.5 + -1 * -2 - 0.25));

  CHECK_THROWS_AS(forward_dense(ps, e, Tensor(1, 4)), ConfigError);
}

TEST_CASE("tanh dense layer matches the tape forward") {
  ParamStore ps;
  std::mt19937_64 rng(4);
  Mlp mlp = make_mlp(ps, "m", {5, 7, 3}, rng);
  const Tensor x = random_tensor(4, 5, rng);
  Tape t(ps);
  CHECK(t.value(forward(t, mlp, t.constant(x))) == forward_mlp(ps, mlp, x));
}

TEST_CASE("backward examples") {
  ParamStore ps;
  ps.add("p", Tensor(1, 3, std::vector<double>{1.0, -2.0, 0.5}));
  ps.add("unused", Tensor(2, 2, 3.0));
  {
    Tape t(&ps);
    Var p = t.param("p");
    t.backward(sum(t, square(t, p)));
  }
  CHECK(ps.at("p").grad[0] == 2.0);
  CHECK(ps.at("p").grad[1] == -4.0);
  CHECK(ps.at("p").grad[2] == 1.0);
  for (double g : ps.at("unused").grad.values()) CHECK(g == 0.0);

  // sum(W x): dL/dW[i][j] = x[i] for every output column j.
  ParamStore ws;
  std::mt19937_64 rng(2);
  ws.add("W", random_tensor(3, 2, rng));
  const Tensor x(1, 3, std::vector<double>{0.3, -1.2, 2.0});
  {
    Tape t(&ws);
    t.backward(sum(t, matmul(t, t.constant(x), t.param("W"))));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) CHECK(ws.at("W").grad(i, j) == doctest::Approx(x[i]));
  }
}

TEST_CASE("backward requires a scalar on a writable tape") {
  ParamStore ps;
  ps.add("p", Tensor(2, 2, 1.0));
  Tape t(&ps);
  CHECK_THROWS_AS(t.backward(t.param("p")), ContractViolation);
  Tape ro(static_cast<const ParamStore&>(ps));
  Var s = sum(ro, ro.param("p"));
  CHECK_THROWS_AS(ro.backward(s), ContractViolation);
}

TEST_CASE("shape mismatches are configuration errors") {
  Tape t;
  Var a = t.constant(Tensor(2, 3));
  Var b = t.constant(Tensor(3, 2));
  CHECK_THROWS_AS(add(t, a, b), ConfigError);
  CHECK_THROWS_AS(matmul(t, a, a), ConfigError);
  CHECK_NOTHROW(matmul(t, a, b));
}

TEST_CASE("adam examples") {
  SUBCASE("zero gradient from fresh state leaves parameters alone") {
    ParamStore ps;
    ps.add("p", Tensor(1, 3, std::vector<double>{1, 2, 3}));
    const Tensor before = ps.at("p").value;
    adam_step(ps);
    CHECK(ps.at("p").value == before);
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    ParamStore ps;
    ps.add("p", Tensor(1, 4, std::vector<double>{0, 0, 0, 0}));
    ps.at("p").grad = Tensor(1, 4, std::vector<double>{0.3, -5.0, 1e-3, -2e-2});
    adam_step(ps, 0.01, 0.9, 0.999, 1e-8);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    const double g[] = {0.3, -5.0, 1e-3, -2e-2};
    for (int i = 0; i < 4; ++i) {
      CHECK(ps.at("p").value[i] == doctest::Approx(-0.01 * g[i] / (std::abs(g[i]) + 1e-8)));
    }
    for (double x : ps.at("p").grad.values()) CHECK(x == 0.0);
    CHECK(ps.adam_steps() == 1);
  }
  SUBCASE("constant gradient keeps pushing the same way") {
    ParamStore ps;
    ps.add("p", Tensor(1, 2, std::vector<double>{0, 0}));
    for (int s = 0; s < 50; ++s) {
      ps.at("p").grad = Tensor(1, 2, std::vector<double>{2.0, -0.5});
      adam_step(ps);
    }
    CHECK(ps.at("p").value[0] < -0.04);
    CHECK(ps.at("p").value[1] > 0.04);
  }
}

TEST_CASE("finite difference checker") {
  SUBCASE("quadratic") {
    ParamStore ps;
    std::mt19937_64 rng(5);
    ps.add("a", random_tensor(2, 3, rng));
    const double err = finite_diff_check(
        [&](Tape& t) { return scale(t, sum(t, square(t, t.param("a"))), 0.5); }, ps, 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("constant loss") {
    ParamStore ps;
    ps.add("a", Tensor(1, 2, 1.0));
    const double err =
        finite_diff_check([&](Tape& t) { return t.constant(Tensor::scalar(3.0)); }, ps, 1e-5);
    CHECK(err == 0.0);
  }
  SUBCASE("tanh network with 32 parameters") {
    ParamStore ps;
    std::mt19937_64 rng(6);
    Mlp mlp = make_mlp(ps, "m", {3, 5, 2}, rng);
    CHECK(ps.count() == 32);
    const Tensor x = random_tensor(6, 3, rng);
    const Tensor y = random_tensor(6, 2, rng);
    const double err = finite_diff_check(
        [&](Tape& t) { return mse_rows(t, forward(t, mlp, t.constant(x)), t.constant(y)); }, ps,
        1e-5);
    CHECK(err < 1e-4);
  }
  SUBCASE("step outside the allowed range") {
    ParamStore ps;
    ps.add("a", Tensor(1, 1, 1.0));
    auto f = [&](Tape& t) { return sum(t, t.param("a")); };
    CHECK_THROWS_AS(finite_diff_check(f, ps, 1e-2), ConfigError);
    CHECK_THROWS_AS(finite_diff_check(f, ps, 1e-8), ConfigError);
  }
}

TEST_CASE("every differentiable op passes the gradient oracle") {
  std::mt19937_64 rng(11);
  ParamStore ps;
  ps.add("a", random_tensor(4, 3, rng, 0.7));
  ps.add("b", random_tensor(4, 3, rng, 0.7));
  ps.add("c", random_tensor(3, 2, rng, 0.7));
  ps.add("r", random_tensor(1, 3, rng, 0.7));
  auto A = [](Tape& t) { return t.param("a"); };
  auto B = [](Tape& t) { return t.param("b"); };

  const std::vector<std::pair<std::string, std::function<Var(Tape&)>>> ops = {
      {"matmul", [&](Tape& t) { return matmul(t, A(t), t.param("c")); }},
      {"add", [&](Tape& t) { return add(t, A(t), B(t)); }},
      {"sub", [&](Tape& t) { return sub(t, A(t), B(t)); }},
      {"mul", [&](Tape& t) { return mul(t, A(t), B(t)); }},
      {"scale", [&](Tape& t) { return scale(t, A(t), -1.7); }},
      {"scale_rows", [&](Tape& t) { return scale_rows(t, A(t), {0.5, -1.0, 2.0, 3.0}); }},
      {"add_row", [&](Tape& t) { return add_row(t, A(t), t.param("r")); }},
      {"tanh", [&](Tape& t) { return tanh(t, A(t)); }},
      {"exp", [&](Tape& t) { return exp(t, A(t)); }},
      {"square", [&](Tape& t) { return square(t, A(t)); }},
      {"concat", [&](Tape& t) { return concat_cols(t, A(t), B(t)); }},
      {"slice", [&](Tape& t) { return slice_cols(t, A(t), 1, 2); }},
      {"row_dot", [&](Tape& t) { return row_dot(t, A(t), B(t)); }},
      {"mse_rows", [&](Tape& t) { return mse_rows(t, A(t), B(t)); }},
      {"gaussian_kl", [&](Tape& t) { return gaussian_kl_rows(t, A(t), B(t)); }},
      {"diffused_kl",
       [&](Tape& t) { return diffused_kl_rows(t, A(t), B(t), {1.0, 0.7, 0.2, 0.01}); }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    const double err = finite_diff_check([&](Tape& t) { return probe(t, op(t), 99); }, ps, 1e-5);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("graph ops pass the gradient oracle") {
  std::mt19937_64 rng(12);
  const GraphBatch batch = two_graph_batch();
  ParamStore ps;
  ps.add("h", random_tensor(batch.nodes(), 3, rng, 0.7));
  ps.add("s", random_tensor(batch.nodes(), 1, rng, 0.7));
  ps.add("g", random_tensor(batch.graphs(), 3, rng, 0.7));
  const std::vector<std::pair<std::string, std::function<Var(Tape&)>>> ops = {
      {"propagate1", [&](Tape& t) { return propagate(t, t.param("h"), batch, 1); }},
      {"propagate2", [&](Tape& t) { return propagate(t, t.param("h"), batch, 2); }},
      {"pair_sum", [&](Tape& t) { return pair_sum(t, t.param("h"), batch); }},
      {"segment_sum", [&](Tape& t) { return segment_sum(t, t.param("h"), batch); }},
      {"broadcast", [&](Tape& t) { return broadcast_segments(t, t.param("g"), batch); }},
      {"attention",
       [&](Tape& t) { return attention_pool(t, t.param("s"), t.param("h"), batch); }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    const double err = finite_diff_check([&](Tape& t) { return probe(t, op(t), 7); }, ps, 1e-5);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("propagate sums neighbours joined by the requested label") {
  const GraphBatch batch = two_graph_batch();
  Tensor h(batch.nodes(), 1);
  for (std::size_t i = 0; i < h.rows(); ++i) h(i, 0) = static_cast<double>(1 << i);
  Tape t;
  const Tensor single = t.value(propagate(t, t.constant(h), batch, 1));
  // Recount from the pair list: graph 1 pairs (0,1)(0,2)(0,3)(1,2)(1,3)(2,3).
  std::vector<double> expect(batch.nodes(), 0.0);
  for (std::size_t g = 0; g < batch.graphs(); ++g) {
    const std::size_t n = batch.graph_size(g), off = batch.node_offset[g];
    std::size_t p = batch.pair_offset[g];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j, ++p) {
        if (batch.pair_label[p] != 1) continue;
        expect[off + i] += h(off + j, 0);
        expect[off + j] += h(off + i, 0);
      }
    }
  }
  for (std::size_t i = 0; i < batch.nodes(); ++i) CHECK(single(i, 0) == expect[i]);
}

TEST_CASE("kl of a standard normal posterior is zero") {
  Tape t;
  Var mu = t.constant(Tensor(3, 4, 0.0));
  Var lv = t.constant(Tensor(3, 4, 0.0));
  CHECK(t.value(gaussian_kl_rows(t, mu, lv)).item() == doctest::Approx(0.0));
  CHECK(t.value(diffused_kl_rows(t, mu, lv, {1.0, 0.5, 0.1})).item() == doctest::Approx(0.0));
  // Closed form for mu = 1, logvar = 0 in 4 dims: 0.5 * 4 * mu^2.
  Var mu1 = t.constant(Tensor(1, 4, 1.0));
  Var lv1 = t.constant(Tensor(1, 4, 0.0));
  CHECK(t.value(gaussian_kl_rows(t, mu1, lv1)).item() == doctest::Approx(2.0));
}

TEST_CASE("identical inputs give bit-identical losses") {
  std::mt19937_64 r1(8), r2(8);
  ParamStore a, b;
  Mlp ma = make_mlp(a, "m", {4, 6, 2}, r1);
  Mlp mb = make_mlp(b, "m", {4, 6, 2}, r2);
  std::mt19937_64 d(9);
  const Tensor x = random_tensor(5, 4, d), y = random_tensor(5, 2, d);
  Tape ta(a), tb(b);
  CHECK(ta.value(mse_rows(ta, forward(ta, ma, ta.constant(x)), ta.constant(y))).item() ==
        tb.value(mse_rows(tb, forward(tb, mb, tb.constant(x)), tb.constant(y))).item());
}
