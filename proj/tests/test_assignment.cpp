#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "compdis/assignment.hpp"
#include "compdis/rng.hpp"

using namespace compdis;
using namespace compdis::assign;

namespace {

double brute_force_min_cost(const Tensor& cost, std::vector<int>* best_perm = nullptr) {
  const int K = cost.dim(0);
  std::vector<int> perm(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) perm[static_cast<size_t>(i)] = i;
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int i = 0; i < K; ++i) c += cost[static_cast<size_t>(i) * K + perm[static_cast<size_t>(i)]];
    if (c < best) {
      best = c;
      if (best_perm) *best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("sinkhorn: K=1 is the trivial matrix") {
  auto a = sinkhorn(Tensor::from({1, 1}, {3.7}), 0.5);
  CHECK(a.entries[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sinkhorn: strong diagonal preference at low temperature") {
  auto a = sinkhorn(Tensor::from({2, 2}, {0, 1, 1, 0}), 0.1, 500, 1e-10);
  CHECK(a.entries[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(a.entries[3] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(a.entries[1] < 1e-3);
  CHECK(a.entries[2] < 1e-3);
}

TEST_CASE("sinkhorn: random costs become doubly stochastic within 200 iterations") {
  // at the loss default epsilon=0.05 near-tied assignments converge too
  // slowly for a fixed 200-sweep budget; epsilon=0.3 was measured to reach
  // 1e-6 on worst-of-300 random draws within ~80 sweeps
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor cost = Tensor::uniform({5, 5}, rng, 0.0, 2.0);
    auto a = sinkhorn(cost, 0.3, 200, 1e-7);
    CHECK(a.iters <= 200);
    for (int r = 0; r < 5; ++r) {
      double rs = 0, cs = 0;
      for (int c = 0; c < 5; ++c) {
        rs += a.entries[static_cast<size_t>(r) * 5 + c];
        cs += a.entries[static_cast<size_t>(c) * 5 + r];
      }
      CHECK(std::fabs(rs - 1.0) < 1e-6);
      CHECK(std::fabs(cs - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("sinkhorn: invariant to row/column cost offsets") {
  Rng rng(7);
  Tensor cost = Tensor::uniform({4, 4}, rng, 0.0, 1.0);
  auto base = sinkhorn(cost, 0.2, 2000, 1e-12);
  Tensor shifted = cost;
  for (int c = 0; c < 4; ++c) shifted[static_cast<size_t>(1) * 4 + c] += 0.7;  // row 1
  for (int r = 0; r < 4; ++r) shifted[static_cast<size_t>(r) * 4 + 2] += -0.3;  // col 2
  auto moved = sinkhorn(shifted, 0.2, 2000, 1e-12);
  for (size_t i = 0; i < base.entries.numel(); ++i)
    CHECK(moved.entries[i] == doctest::Approx(base.entries[i]).epsilon(1e-6));
}

namespace {

// min assignment cost with row fr forced to column fc (brute force)
double best_through(const Tensor& cost, int K, int fr, int fc) {
  std::vector<int> cols;
  for (int c = 0; c < K; ++c)
    if (c != fc) cols.push_back(c);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = cost[static_cast<size_t>(fr) * K + fc];
    int ci = 0;
    for (int r = 0; r < K; ++r) {
      if (r == fr) continue;
      s += cost[static_cast<size_t>(r) * K + cols[static_cast<size_t>(ci++)]];
    }
    best = std::min(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

}  // namespace

TEST_CASE("sinkhorn converges to the hard assignment as epsilon shrinks") {
  // the entropic plan sits ~exp(-slack/(L*eps)) from the vertex along length-L
  // alternating cycles, so the "unique optimal permutation" qualifier needs a
  // margin: keep random costs whose per-cell brute-force slack is >= 0.25
  Rng rng(11);
  int kept = 0;
  for (int rep = 0; rep < 400 && kept < 10; ++rep) {
    Tensor cost = Tensor::uniform({4, 4}, rng, 0.0, 2.0);
    const auto hard = hungarian(cost);
    double total = 0;
    for (int r = 0; r < 4; ++r) total += cost[static_cast<size_t>(r) * 4 + hard.perm[static_cast<size_t>(r)]];
    double min_slack = std::numeric_limits<double>::infinity();
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        if (c != hard.perm[static_cast<size_t>(r)])
          min_slack = std::min(min_slack, best_through(cost, 4, r, c) - total);
    if (min_slack < 0.25) continue;
    ++kept;
    const auto soft = sinkhorn(cost, 0.01, 600000, 1e-10, /*anneal_from=*/0.5);
    double max_err = 0;
    for (size_t i = 0; i < cost.numel(); ++i)
      max_err = std::max(max_err, std::fabs(soft.entries[i] - hard.entries[i]));
    CHECK(max_err < 1e-2);
  }
  CHECK(kept == 10);
}

TEST_CASE("plain sinkhorn matches the differentiable graph variant") {
  Rng rng(21);
  Tensor cost = Tensor::uniform({5, 5}, rng, 0.0, 2.0);
  auto plain = sinkhorn(cost, 0.1, 300, 1e-8);
  Graph g;
  Graph::NoGrad ng(g);
  SinkhornConfig cfg{0.1, 300, 1e-8};
  Var p = sinkhorn_graph(g.constant(cost), cfg);
  for (size_t i = 0; i < plain.entries.numel(); ++i)
    CHECK(plain.entries[i] == doctest::Approx(p.val()[i]).epsilon(1e-10));
}

TEST_CASE("sinkhorn_graph is differentiable through the final iterate") {
  Rng rng(13);
  Tensor cost = Tensor::uniform({3, 3}, rng, 0.0, 1.5);
  Tensor w = Tensor::randn({3, 3}, rng);
  SinkhornConfig cfg{0.2, 50, 1e-9};
  Graph g;
  Var c = g.leaf(cost, true);
  Var p = sinkhorn_graph(c, cfg);
  g.backward(dot_all(p, g.constant(w)));
  const Tensor grad = g.grad_or_zero(c);
  const double h = 1e-6;
  for (size_t j = 0; j < cost.numel(); ++j) {
    auto eval = [&](double delta) {
      Graph g2;
      Graph::NoGrad ng(g2);
      Tensor ct = cost;
      ct[j] += delta;
      Var pp = sinkhorn_graph(g2.constant(ct), cfg);
      double acc = 0;
      for (size_t e = 0; e < w.numel(); ++e) acc += w[e] * pp.val()[e];
      return acc;
    };
    const double fd = (eval(h) - eval(-h)) / (2 * h);
    CHECK(std::fabs(fd - grad[j]) < 1e-5 * std::max(1.0, std::fabs(fd)));
  }
}

TEST_CASE("hungarian: identity-favoring cost returns the identity") {
  Tensor cost({3, 3});
  cost.fill(1.0);
  for (int i = 0; i < 3; ++i) cost[static_cast<size_t>(i) * 3 + i] = 0.0;
  const auto a = hungarian(cost);
  for (int i = 0; i < 3; ++i) CHECK(a.perm[static_cast<size_t>(i)] == i);
}

TEST_CASE("hungarian equals brute force on random costs up to K=6") {
  Rng rng(17);
  for (int rep = 0; rep < 200; ++rep) {
    const int K = rng.uniform_int(2, 6);
    Tensor cost = Tensor::uniform({K, K}, rng, -1.0, 1.0);
    std::vector<int> best_perm;
    const double best = brute_force_min_cost(cost, &best_perm);
    const auto a = hungarian(cost);
    double got = 0;
    for (int i = 0; i < K; ++i) got += cost[static_cast<size_t>(i) * K + a.perm[static_cast<size_t>(i)]];
    CHECK(got == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("hungarian breaks ties toward the lexicographically smallest permutation") {
  // two optimal permutations: identity and the swap both cost 2
  Tensor cost = Tensor::from({2, 2}, {1, 1, 1, 1});
  auto a = hungarian(cost);
  CHECK(a.perm == std::vector<int>{0, 1});
  // a larger constructed tie: block of equal costs
  Tensor cost3 = Tensor::from({3, 3}, {0, 0, 5, 0, 0, 5, 5, 5, 0});
  auto b = hungarian(cost3);
  CHECK(b.perm == std::vector<int>{0, 1, 2});
}

TEST_CASE("non-finite costs are rejected") {
  Tensor bad = Tensor::from({2, 2}, {0.0, 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0});
  CHECK_THROWS_AS(hungarian(bad), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn(bad, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn(Tensor::from({1, 1}, {0.0}), -1.0), std::invalid_argument);
}
