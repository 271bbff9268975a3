#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "compdis/graph.hpp"
#include "compdis/rng.hpp"

using namespace compdis;

namespace {

// Central-difference check of d(dot(w, op(inputs)))/d(inputs) against the
// tape, elementwise.
void check_grad(const std::function<Var(Graph&, std::vector<Var>&)>& build,
                std::vector<Tensor> inputs, double tol = 1e-6, double h = 1e-5) {
  Rng rng(99);
  Graph g;
  std::vector<Var> leaves;
  for (auto& t : inputs) leaves.push_back(g.leaf(t, true));
  Var out = build(g, leaves);
  Tensor w = Tensor::randn(out.val().shape(), rng);
  Var scalar = dot_all(out, g.constant(w));
  g.backward(scalar);
  std::vector<Tensor> grads;
  for (Var l : leaves) grads.push_back(g.grad_or_zero(l));

  for (size_t i = 0; i < inputs.size(); ++i) {
    for (size_t j = 0; j < inputs[i].numel(); ++j) {
      auto eval = [&](double delta) {
        Graph g2;
        Graph::NoGrad ng(g2);
        std::vector<Var> ls;
        for (size_t k = 0; k < inputs.size(); ++k) {
          Tensor t = inputs[k];
          if (k == i) t[j] += delta;
          ls.push_back(g2.leaf(std::move(t), false));
        }
        Var o = build(g2, ls);
        double acc = 0;
        for (size_t e = 0; e < w.numel(); ++e) acc += w[e] * o.val()[e];
        return acc;
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double an = grads[i][j];
      const double scale = std::max({1.0, std::fabs(fd), std::fabs(an)});
      INFO("input ", i, " element ", j, " fd=", fd, " analytic=", an);
      CHECK(std::fabs(fd - an) / scale < tol);
    }
  }
}

Tensor randt(std::vector<int> shape, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng);
}

Tensor rand_pos(std::vector<int> shape, uint64_t seed, double lo = 0.5, double hi = 2.0) {
  Rng rng(seed);
  return Tensor::uniform(std::move(shape), rng, lo, hi);
}

}  // namespace

TEST_CASE("elementwise ops") {
  check_grad([](Graph&, std::vector<Var>& v) { return add(v[0], v[1]); },
             {randt({3, 4}, 1), randt({3, 4}, 2)});
  check_grad([](Graph&, std::vector<Var>& v) { return sub(v[0], v[1]); },
             {randt({3, 4}, 3), randt({3, 4}, 4)});
  check_grad([](Graph&, std::vector<Var>& v) { return mul(v[0], v[1]); },
             {randt({3, 4}, 5), randt({3, 4}, 6)});
  check_grad([](Graph&, std::vector<Var>& v) { return add_scalar(v[0], 2.5); }, {randt({5}, 7)});
  check_grad([](Graph&, std::vector<Var>& v) { return mul_scalar(v[0], -1.7); }, {randt({5}, 8)});
  check_grad([](Graph&, std::vector<Var>& v) { return vexp(v[0]); }, {randt({4}, 9)});
  check_grad([](Graph&, std::vector<Var>& v) { return vlog(v[0]); }, {rand_pos({4}, 10)});
  check_grad([](Graph&, std::vector<Var>& v) { return vsqrt(v[0]); }, {rand_pos({4}, 11)});
  check_grad([](Graph&, std::vector<Var>& v) { return vrsqrt(v[0], 0.1); }, {rand_pos({4}, 12)});
  check_grad([](Graph&, std::vector<Var>& v) { return silu(v[0]); }, {randt({6}, 13)});
  // keep relu inputs away from the kink
  Tensor r = randt({6}, 14);
  for (size_t i = 0; i < r.numel(); ++i) r[i] += r[i] >= 0 ? 0.2 : -0.2;
  check_grad([](Graph&, std::vector<Var>& v) { return relu(v[0]); }, {r});
}

TEST_CASE("broadcast ops") {
  check_grad([](Graph&, std::vector<Var>& v) { return add_bias_last(v[0], v[1]); },
             {randt({3, 4}, 20), randt({4}, 21)});
  check_grad([](Graph&, std::vector<Var>& v) { return add_bias_ch(v[0], v[1]); },
             {randt({2, 3, 2, 2}, 22), randt({3}, 23)});
  check_grad([](Graph&, std::vector<Var>& v) { return add_per_sample_ch(v[0], v[1]); },
             {randt({2, 3, 2, 2}, 24), randt({2, 3}, 25)});
  check_grad([](Graph&, std::vector<Var>& v) { return scale_per_sample(v[0], v[1]); },
             {randt({3, 2, 2, 2}, 26), randt({3}, 27)});
  check_grad([](Graph&, std::vector<Var>& v) { return mul_colvec(v[0], v[1]); },
             {randt({3, 4}, 28), randt({3}, 29)});
  check_grad([](Graph&, std::vector<Var>& v) { return add_colvec(v[0], v[1]); },
             {randt({3, 4}, 30), randt({3}, 31)});
  check_grad([](Graph&, std::vector<Var>& v) { return add_rowvec(v[0], v[1]); },
             {randt({3, 4}, 32), randt({4}, 33)});
}

TEST_CASE("matmul family") {
  check_grad([](Graph&, std::vector<Var>& v) { return matmul(v[0], v[1]); },
             {randt({3, 4}, 40), randt({4, 5}, 41)});
  check_grad([](Graph&, std::vector<Var>& v) { return matmul_nt(v[0], v[1]); },
             {randt({3, 4}, 42), randt({5, 4}, 43)});
  check_grad([](Graph&, std::vector<Var>& v) { return matmul_tn(v[0], v[1]); },
             {randt({4, 3}, 44), randt({4, 5}, 45)});
  check_grad([](Graph&, std::vector<Var>& v) { return bmm(v[0], v[1]); },
             {randt({2, 3, 4}, 46), randt({2, 4, 5}, 47)});
  check_grad([](Graph&, std::vector<Var>& v) { return bmm_nt(v[0], v[1]); },
             {randt({2, 3, 4}, 48), randt({2, 5, 4}, 49)});
}

TEST_CASE("reductions and softmax") {
  check_grad([](Graph&, std::vector<Var>& v) { return sum_all(v[0]); }, {randt({3, 4}, 50)});
  check_grad([](Graph&, std::vector<Var>& v) { return mean_all(v[0]); }, {randt({3, 4}, 51)});
  check_grad([](Graph&, std::vector<Var>& v) { return row_sum(v[0]); }, {randt({3, 4}, 52)});
  check_grad([](Graph&, std::vector<Var>& v) { return lse_rows(v[0]); }, {randt({3, 4}, 53)});
  check_grad([](Graph&, std::vector<Var>& v) { return softmax_last(v[0]); }, {randt({3, 4}, 54)});
  check_grad([](Graph&, std::vector<Var>& v) { return softmax_last(v[0]); }, {randt({2, 3, 4}, 55)});
}

TEST_CASE("shape ops") {
  check_grad([](Graph&, std::vector<Var>& v) { return reshape(v[0], {4, 3}); }, {randt({3, 4}, 60)});
  check_grad([](Graph&, std::vector<Var>& v) { return transpose2d(v[0]); }, {randt({3, 4}, 61)});
  check_grad([](Graph&, std::vector<Var>& v) { return slice_rows(v[0], 1, 3); }, {randt({4, 3}, 62)});
  check_grad([](Graph&, std::vector<Var>& v) { return concat_rows(v[0], v[1]); },
             {randt({2, 3}, 63), randt({4, 3}, 64)});
  check_grad(
      [](Graph&, std::vector<Var>& v) {
        return concat_rows_n({v[0], v[1], v[2]});
      },
      {randt({2, 3}, 65), randt({1, 3}, 66), randt({2, 3}, 67)});
  check_grad([](Graph&, std::vector<Var>& v) { return gather_rows(v[0], {2, 0, 2, 1}); },
             {randt({3, 4}, 68)});
  check_grad([](Graph&, std::vector<Var>& v) { return concat_ch(v[0], v[1]); },
             {randt({2, 2, 3, 3}, 69), randt({2, 1, 3, 3}, 70)});
  check_grad([](Graph&, std::vector<Var>& v) { return slice_ch(v[0], 1, 3); },
             {randt({2, 4, 2, 2}, 71)});
  check_grad([](Graph&, std::vector<Var>& v) { return mul_bc_ch(v[0], v[1]); },
             {randt({2, 3, 2, 2}, 72), randt({2, 1, 2, 2}, 73)});
  check_grad([](Graph&, std::vector<Var>& v) { return heads_split(v[0], 2); },
             {randt({2, 3, 4}, 74)});
  check_grad([](Graph&, std::vector<Var>& v) { return heads_merge(v[0], 2); },
             {randt({4, 3, 2}, 75)});
  check_grad([](Graph&, std::vector<Var>& v) { return nchw_to_ntc(v[0]); },
             {randt({2, 3, 2, 2}, 76)});
  check_grad([](Graph&, std::vector<Var>& v) { return ntc_to_nchw(v[0], 2, 2); },
             {randt({2, 4, 3}, 77)});
}

TEST_CASE("conv and vision ops") {
  check_grad(
      [](Graph&, std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
      {randt({2, 2, 4, 4}, 80), randt({3, 2, 3, 3}, 81), randt({3}, 82)});
  check_grad(
      [](Graph&, std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 2, 1); },
      {randt({1, 2, 4, 4}, 83), randt({2, 2, 3, 3}, 84), randt({2}, 85)});
  check_grad([](Graph&, std::vector<Var>& v) { return conv2d(v[0], v[1], Var{}, 1, 0); },
             {randt({1, 1, 3, 3}, 86), randt({2, 1, 2, 2}, 87)});
  check_grad([](Graph&, std::vector<Var>& v) { return upsample2x(v[0]); },
             {randt({2, 2, 2, 2}, 88)});
  check_grad([](Graph&, std::vector<Var>& v) { return space_to_depth(v[0], 2); },
             {randt({1, 2, 4, 4}, 89)});
  check_grad([](Graph&, std::vector<Var>& v) { return depth_to_space(v[0], 2); },
             {randt({1, 8, 2, 2}, 90)});
}

TEST_CASE("normalization") {
  check_grad(
      [](Graph&, std::vector<Var>& v) { return group_norm(v[0], v[1], v[2], 2, 1e-5); },
      {randt({2, 4, 3, 3}, 100), rand_pos({4}, 101), randt({4}, 102)}, 1e-5);
  check_grad(
      [](Graph&, std::vector<Var>& v) { return layer_norm_last(v[0], v[1], v[2], 1e-5); },
      {randt({3, 5}, 103), rand_pos({5}, 104), randt({5}, 105)}, 1e-5);
}

TEST_CASE("composites") {
  check_grad([](Graph&, std::vector<Var>& v) { return l2_normalize_rows(v[0]); },
             {randt({3, 4}, 110)});
  check_grad([](Graph&, std::vector<Var>& v) { return cosine_matrix(v[0], v[1]); },
             {randt({3, 4}, 111), randt({2, 4}, 112)});
  check_grad([](Graph&, std::vector<Var>& v) { return mse(v[0], v[1]); },
             {randt({3, 4}, 113), randt({3, 4}, 114)});
  check_grad(
      [](Graph&, std::vector<Var>& v) { return linear(v[0], v[1], v[2]); },
      {randt({3, 4}, 115), randt({4, 2}, 116), randt({2}, 117)});
}

TEST_CASE("parameter caching accumulates across uses") {
  Param p;
  p.name = "w";
  p.value = randt({2, 2}, 120);
  Graph g;
  Var a = g.use(p);
  Var b = g.use(p);
  CHECK(a.id == b.id);
  Var loss = sum_all(add(mul(a, a), b));
  g.backward(loss);
  // d/dw (w*w + w) = 2w + 1
  const Tensor& grad = g.grad(a);
  for (size_t i = 0; i < grad.numel(); ++i)
    CHECK(grad[i] == doctest::Approx(2 * p.value[i] + 1.0));
}

TEST_CASE("no-grad scope produces untracked nodes") {
  Graph g;
  Var x = g.leaf(randt({3}, 121), true);
  Var y;
  {
    Graph::NoGrad ng(g);
    y = mul(x, x);
  }
  CHECK_FALSE(tracked(y));
  Var z = sum_all(add(y, x));
  g.backward(z);
  const Tensor& grad = g.grad(x);
  for (size_t i = 0; i < grad.numel(); ++i) CHECK(grad[i] == doctest::Approx(1.0));  // only the +x path
}

TEST_CASE("detach blocks gradients") {
  Graph g;
  Var x = g.leaf(randt({3}, 122), true);
  Var z = sum_all(mul(detach(x), x));
  g.backward(z);
  const Tensor& grad = g.grad(x);
  for (size_t i = 0; i < grad.numel(); ++i) CHECK(grad[i] == doctest::Approx(x.val()[i]));
}

TEST_CASE("repeated backward resets node gradients") {
  Graph g;
  Var x = g.leaf(randt({3}, 123), true);
  Var l1 = sum_all(mul(x, x));
  Var l2 = sum_all(x);
  g.backward(l1);
  Tensor g1 = g.grad(x);
  g.backward(l2);
  const Tensor& g2 = g.grad(x);
  for (size_t i = 0; i < g2.numel(); ++i) {
    CHECK(g1[i] == doctest::Approx(2 * x.val()[i]));
    CHECK(g2[i] == doctest::Approx(1.0));
  }
}

TEST_CASE("adam minimizes a quadratic") {
  Param p;
  p.name = "x";
  p.value = Tensor::from({2}, {3.0, -2.0});
  Adam opt({0.05});
  for (int it = 0; it < 400; ++it) {
    Graph g;
    Var x = g.use(p);
    Var loss = sum_all(mul(x, x));
    opt.zero_grads({&p});
    g.backward(loss);
    g.accumulate_param_grads({&p});
    opt.step({&p});
  }
  CHECK(std::fabs(p.value[0]) < 1e-2);
  CHECK(std::fabs(p.value[1]) < 1e-2);
}
