#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "compdis/nets.hpp"
#include "compdis/rng.hpp"
#include "compdis/sampler.hpp"
#include "compdis/schedule.hpp"

using namespace compdis;
using namespace compdis::nets;

TEST_CASE("schedule tables: monotonicity and sigma identity") {
  NoiseSchedule sched({1000, 1e-4, 0.02});
  CHECK(sched.alpha_bar(0) == 1.0);
  CHECK(sched.sigma(0) == 0.0);
  for (int t = 1; t <= sched.T(); ++t) {
    CHECK(sched.beta(t) >= sched.beta(1));
    CHECK(sched.beta(t) <= sched.beta(sched.T()));
    CHECK(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
    CHECK(sched.sigma(t) == doctest::Approx(std::sqrt(1.0 - sched.alpha_bar(t))).epsilon(1e-12));
    CHECK(sched.sqrt_alpha_bar(t) * sched.sqrt_alpha_bar(t) + sched.sigma(t) * sched.sigma(t) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(NoiseSchedule({0, 1e-4, 0.02}), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule({10, 0.5, 0.1}), std::invalid_argument);
}

TEST_CASE("add_noise limits and table midpoint") {
  NoiseSchedule sched({1000, 1e-4, 0.02});
  Rng rng(5);
  Tensor x0 = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor eps = Tensor::randn({2, 3, 4, 4}, rng);

  // near-zero noise at t=1 with a tiny beta start
  NoiseSchedule gentle({1000, 1e-9, 0.02});
  Tensor near = add_noise(x0, 1, eps, gentle);
  for (size_t i = 0; i < near.numel(); ++i) CHECK(near[i] == doctest::Approx(x0[i]).epsilon(1e-3));

  // alpha_bar(T) ~ 0: output is almost pure noise
  Tensor late = add_noise(x0, sched.T(), eps, sched);
  for (size_t i = 0; i < late.numel(); ++i) CHECK(late[i] == doctest::Approx(eps[i]).epsilon(2e-2));

  // mid-t, eps = 0, constant image: exactly sqrt(alpha_bar)*x0 from the table
  Tensor ones = Tensor::full({1, 3, 2, 2}, 1.0);
  Tensor zero({1, 3, 2, 2});
  const int t = 500;
  Tensor mid = add_noise(ones, t, zero, sched);
  for (size_t i = 0; i < mid.numel(); ++i) CHECK(mid[i] == sched.sqrt_alpha_bar(t));

  CHECK_THROWS_AS(add_noise(x0, 1, Tensor({1, 3, 4, 4}), sched), std::invalid_argument);
}

TEST_CASE("v parameterization algebra closes") {
  NoiseSchedule sched({1000, 1e-4, 0.02});
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const int t = rng.uniform_int(1, sched.T());
    Tensor x0 = Tensor::randn({1, 3, 4, 4}, rng);
    Tensor eps = Tensor::randn({1, 3, 4, 4}, rng);
    Tensor x_t = add_noise(x0, t, eps, sched);
    Tensor v = v_target(x0, eps, t, sched);
    Tensor x0_rec = x0_from_v(x_t, v, t, sched);
    Tensor eps_rec = eps_from_v(x_t, v, t, sched);
    for (size_t i = 0; i < x0.numel(); ++i) {
      CHECK(std::fabs(x0_rec[i] - x0[i]) < 1e-6);
      CHECK(std::fabs(eps_rec[i] - eps[i]) < 1e-6);
    }
  }
  // eps = 0 -> v = -sigma * x0
  Tensor x0 = Tensor::full({1, 1, 2, 2}, 2.0);
  Tensor v = v_target(x0, Tensor({1, 1, 2, 2}), 333, sched);
  for (size_t i = 0; i < v.numel(); ++i) CHECK(v[i] == doctest::Approx(-sched.sigma(333) * 2.0));
  // v = 0 at alpha_bar ~ 0: eps_hat ~ x_t
  Tensor xt = Tensor::full({1, 1, 2, 2}, 1.5);
  Tensor eh = eps_from_v(xt, Tensor({1, 1, 2, 2}), sched.T(), sched);
  for (size_t i = 0; i < eh.numel(); ++i)
    CHECK(eh[i] == doctest::Approx(sched.sigma(sched.T()) * 1.5));
}

namespace {

// Returns the exact v for a fixed clean image regardless of the input.
struct PerfectDenoiser : Denoiser {
  Tensor x0;
  const NoiseSchedule& sched;
  PerfectDenoiser(Tensor x, const NoiseSchedule& s) : x0(std::move(x)), sched(s) {}
  Var apply(Graph& g, Var x_t, const std::vector<int>& t, Var) override {
    Tensor v(x_t.val().shape());
    const int N = v.dim(0);
    const size_t stride = v.numel() / static_cast<size_t>(N);
    for (int n = 0; n < N; ++n) {
      const double sab = sched.sqrt_alpha_bar(t[static_cast<size_t>(n)]);
      const double sig = sched.sigma(t[static_cast<size_t>(n)]);
      for (size_t i = 0; i < stride; ++i) {
        const size_t k = static_cast<size_t>(n) * stride + i;
        v[k] = (sab * x_t.val()[k] - x0[i]) / sig;
      }
    }
    return g.constant(v);
  }
};

}  // namespace

TEST_CASE("ddim: perfect denoiser returns x0 for any step count") {
  NoiseSchedule sched({1000, 1e-4, 0.02});
  Rng wrng(11);
  Tensor x0 = Tensor::uniform({1, 3, 8, 8}, wrng, -0.5, 0.5);
  PerfectDenoiser oracle(x0, sched);
  for (int steps = 1; steps <= 4; ++steps) {
    Graph g;
    Graph::NoGrad ng(g);
    Rng rng(123);
    Var out = ddim_decode(g, oracle, sched, Var{}, 1, 3, 8, 8, steps, rng);
    for (size_t i = 0; i < x0.numel(); ++i) CHECK(out.val()[i] == doctest::Approx(x0[i]).epsilon(1e-9));
  }
}

TEST_CASE("ddim: same seed is bitwise identical") {
  NoiseSchedule sched({100, 1e-4, 0.02});
  Rng wrng(13);
  UNetConfig cfg;
  cfg.base = 8;
  cfg.heads = 2;
  cfg.image_size = 8;
  UNet net(cfg, wrng);
  auto run = [&]() {
    Graph g;
    Graph::NoGrad ng(g);
    Rng rng(777);
    return ddim_decode(g, net, sched, Var{}, 2, 3, 8, 8, 3, rng).val();
  };
  Tensor a = run(), b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0);
}

TEST_CASE("ddim: steps=1 equals the direct x0 inversion at the top timestep") {
  NoiseSchedule sched({100, 1e-4, 0.02});
  Rng wrng(17);
  UNetConfig cfg;
  cfg.base = 8;
  cfg.heads = 2;
  cfg.image_size = 8;
  UNet net(cfg, wrng);
  Graph g;
  Graph::NoGrad ng(g);
  Rng rng(31);
  Var out = ddim_decode(g, net, sched, Var{}, 1, 3, 8, 8, 1, rng);
  Rng rng2(31);
  Tensor noise = Tensor::randn({1, 3, 8, 8}, rng2);
  Graph g2;
  Graph::NoGrad ng2(g2);
  Var v = net.apply(g2, g2.constant(noise), {sched.T()}, Var{});
  Tensor manual = x0_from_v(noise, v.val(), sched.T(), sched);
  for (size_t i = 0; i < manual.numel(); ++i) CHECK(out.val()[i] == manual[i]);
}

TEST_CASE("ddim: gradients flow only through the final step") {
  NoiseSchedule sched({100, 1e-4, 0.02});
  Rng wrng(19);
  UNetConfig cfg;
  cfg.base = 8;
  cfg.heads = 2;
  cfg.image_size = 8;
  cfg.cond_dim = 4;
  UNet net(cfg, wrng);
  Rng crng(23);
  Tensor cond_t = Tensor::randn({1, 2, 4}, crng);
  Tensor w = Tensor::randn({1, 3, 8, 8}, crng);

  // two-step decode through the library path
  Graph g;
  Rng rng(555);
  Var cond = g.leaf(cond_t, true);
  Var out = ddim_decode(g, net, sched, cond, 1, 3, 8, 8, 2, rng);
  g.backward(dot_all(out, g.constant(w)));
  std::vector<Tensor> lib_grads;
  for (Param* p : net.params()) {
    Var v = g.use(*p);
    lib_grads.push_back(g.grad_or_zero(v));
  }
  Tensor lib_cond_grad = g.grad_or_zero(cond);

  // manual recomputation: run the first step by hand with no tape, then a
  // fresh graph containing only the final application
  const auto ts = ddim_timesteps(sched.T(), 2);
  Rng rng2(555);
  Tensor x = Tensor::randn({1, 3, 8, 8}, rng2);
  Tensor x1;
  {
    Graph gf;
    Graph::NoGrad ng(gf);
    Var v = net.apply(gf, gf.constant(x), {ts[0]}, gf.constant(cond_t));
    Tensor x0 = x0_from_v(x, v.val(), ts[0], sched);
    Tensor eh = eps_from_v(x, v.val(), ts[0], sched);
    x1 = add_noise(x0, ts[1], eh, sched);
  }
  Graph g2;
  Var cond2 = g2.leaf(cond_t, true);
  Var v2 = net.apply(g2, g2.constant(x1), {ts[1]}, cond2);
  Tensor sx = x1;
  sx.scale_(sched.sqrt_alpha_bar(ts[1]));
  Var out2 = sub(g2.constant(sx), mul_scalar(v2, sched.sigma(ts[1])));
  g2.backward(dot_all(out2, g2.constant(w)));

  size_t pi = 0;
  for (Param* p : net.params()) {
    Var v = g2.use(*p);
    Tensor manual = g2.grad_or_zero(v);
    const Tensor& lib = lib_grads[pi++];
    REQUIRE(manual.same_shape(lib));
    for (size_t i = 0; i < manual.numel(); ++i) CHECK(manual[i] == doctest::Approx(lib[i]).epsilon(1e-12));
  }
  Tensor manual_cond = g2.grad_or_zero(cond2);
  for (size_t i = 0; i < manual_cond.numel(); ++i)
    CHECK(manual_cond[i] == doctest::Approx(lib_cond_grad[i]).epsilon(1e-12));
}
