#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "compdis/nets.hpp"

using namespace compdis;
using namespace compdis::nets;

namespace {

Tensor imgs(int n, int s, uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({n, 3, s, s}, rng, -1.0, 1.0);
}

}  // namespace

TEST_CASE("flat encoder: shape, determinism, sensitivity") {
  Rng rng(1);
  EncoderConfig cfg;
  cfg.layout = {6, 6, 8};
  cfg.base = 16;
  Encoder enc(cfg, rng);

  Tensor x = imgs(2, 32, 2);
  Graph g;
  Graph::NoGrad ng(g);
  Var z = enc.forward(g, g.constant(x));
  CHECK(z.val().shape() == std::vector<int>{12, 8});
  CHECK(z.val().all_finite());

  // identical images -> identical latent sets
  Tensor two({2, 3, 32, 32});
  std::copy(x.data(), x.data() + two.numel() / 2, two.data());
  std::copy(x.data(), x.data() + two.numel() / 2, two.data() + two.numel() / 2);
  Var z2 = enc.forward(g, g.constant(two));
  for (size_t i = 0; i < z2.val().numel() / 2; ++i)
    CHECK(z2.val()[i] == z2.val()[z2.val().numel() / 2 + i]);

  // perturbing the input moves the output
  Tensor xp = x;
  xp[0] += 0.5;
  Var zp = enc.forward(g, g.constant(xp));
  double diff = 0;
  for (size_t i = 0; i < z.val().numel(); ++i) diff += std::fabs(zp.val()[i] - z.val()[i]);
  CHECK(diff > 1e-8);

  CHECK_THROWS_AS(enc.forward(g, g.constant(imgs(1, 16, 3))), std::invalid_argument);
}

TEST_CASE("query encoder: shape and determinism") {
  Rng rng(4);
  EncoderConfig cfg;
  cfg.layout = {5, 0, 16};
  cfg.mode = EncoderMode::Query;
  cfg.base = 16;
  cfg.q_hidden = 32;
  cfg.q_blocks = 2;
  cfg.heads = 4;
  Encoder enc(cfg, rng);
  Tensor x = imgs(3, 32, 5);
  Graph g;
  Graph::NoGrad ng(g);
  Var z = enc.forward(g, g.constant(x));
  CHECK(z.val().shape() == std::vector<int>{15, 16});
  Var z2 = enc.forward(g, g.constant(x));
  CHECK(std::memcmp(z.val().data(), z2.val().data(), z.val().numel() * sizeof(double)) == 0);
}

TEST_CASE("unet: output shape equals input shape, conditioning is enforced") {
  Rng rng(6);
  UNetConfig cfg;
  cfg.base = 8;
  cfg.heads = 2;
  cfg.cond_dim = 8;
  UNet net(cfg, rng);
  Tensor x = imgs(2, 32, 7);
  Rng crng(8);
  Tensor cond = Tensor::randn({2, 4, 8}, crng);
  Graph g;
  Graph::NoGrad ng(g);
  Var v = net.apply(g, g.constant(x), {10, 900}, g.constant(cond));
  CHECK(v.val().shape() == x.shape());
  CHECK(v.val().all_finite());
  CHECK_THROWS_AS(net.apply(g, g.constant(x), {10, 900}, Var{}), std::invalid_argument);
  CHECK_THROWS_AS(net.apply(g, g.constant(x), {10}, g.constant(cond)), std::invalid_argument);

  UNetConfig ucfg;
  ucfg.base = 8;
  ucfg.heads = 2;
  UNet uncond(ucfg, rng);
  CHECK_THROWS_AS(uncond.apply(g, g.constant(x), {10, 900}, g.constant(cond)), std::invalid_argument);
  Var vu = uncond.apply(g, g.constant(x), {10, 900}, Var{});
  CHECK(vu.val().shape() == x.shape());
}

TEST_CASE("unet frozen flag gates gradient tracking") {
  Rng rng(9);
  UNetConfig cfg;
  cfg.base = 8;
  cfg.heads = 2;
  cfg.image_size = 8;
  UNet net(cfg, rng);
  CHECK_FALSE(net.frozen());
  net.set_trainable(false);
  CHECK(net.frozen());
  Graph g;
  Var v = net.apply(g, g.constant(imgs(1, 8, 10)), {5}, Var{});
  g.backward(sum_all(v));
  for (Param* p : net.params()) {
    Var pv = g.use(*p, false);
    CHECK_FALSE(g.has_grad(pv));
  }
}

TEST_CASE("sinusoidal embedding shape and range") {
  Tensor e = sinusoidal_embedding({1, 500, 1000}, 16);
  CHECK(e.shape() == std::vector<int>{3, 16});
  for (size_t i = 0; i < e.numel(); ++i) {
    CHECK(e[i] <= 1.0);
    CHECK(e[i] >= -1.0);
  }
  CHECK_THROWS_AS(sinusoidal_embedding({1}, 3), std::invalid_argument);
}
