#include <benchmark/benchmark.h>

#include "compdis/assignment.hpp"
#include "compdis/graph.hpp"
#include "compdis/losses.hpp"
#include "compdis/nets.hpp"
#include "compdis/rng.hpp"

using namespace compdis;

static void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  const int C = static_cast<int>(state.range(0));
  Tensor x = Tensor::randn({8, C, 16, 16}, rng);
  Tensor w = Tensor::randn({C, C, 3, 3}, rng, 0.05);
  Tensor b({C});
  for (auto _ : state) {
    Graph g;
    Graph::NoGrad ng(g);
    Var out = conv2d(g.constant(x), g.constant(w), g.constant(b), 1, 1);
    benchmark::DoNotOptimize(out.val().data());
  }
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32)->Arg(64);

static void BM_UNetForward(benchmark::State& state) {
  Rng rng(2);
  nets::UNetConfig cfg;
  cfg.base = static_cast<int>(state.range(0));
  cfg.cond_dim = 8;
  nets::UNet net(cfg, rng);
  Tensor x = Tensor::randn({8, 3, 32, 32}, rng);
  Tensor cond = Tensor::randn({8, 6, 8}, rng);
  std::vector<int> t(8, 500);
  for (auto _ : state) {
    Graph g;
    Graph::NoGrad ng(g);
    Var out = net.apply(g, g.constant(x), t, g.constant(cond));
    benchmark::DoNotOptimize(out.val().data());
  }
}
BENCHMARK(BM_UNetForward)->Arg(16)->Arg(24)->Arg(32);

static void BM_UNetTrainStep(benchmark::State& state) {
  Rng rng(3);
  nets::UNetConfig cfg;
  cfg.base = static_cast<int>(state.range(0));
  cfg.cond_dim = 8;
  nets::UNet net(cfg, rng);
  Adam opt;
  Tensor x = Tensor::randn({8, 3, 32, 32}, rng);
  Tensor cond = Tensor::randn({8, 6, 8}, rng);
  Tensor target = Tensor::randn({8, 3, 32, 32}, rng);
  std::vector<int> t(8, 500);
  for (auto _ : state) {
    Graph g;
    Var loss = mse(net.apply(g, g.constant(x), t, g.constant(cond)), g.constant(target));
    opt.zero_grads(net.params());
    g.backward(loss);
    g.accumulate_param_grads(net.params());
    opt.step(net.params());
    benchmark::DoNotOptimize(loss.val()[0]);
  }
}
BENCHMARK(BM_UNetTrainStep)->Arg(16)->Arg(24)->Arg(32);

static void BM_Sinkhorn(benchmark::State& state) {
  Rng rng(4);
  const int K = static_cast<int>(state.range(0));
  Tensor cost = Tensor::uniform({K, K}, rng, 0.0, 2.0);
  for (auto _ : state) {
    auto a = assign::sinkhorn(cost, 0.05, 100, 1e-6);
    benchmark::DoNotOptimize(a.entries.data());
  }
}
BENCHMARK(BM_Sinkhorn)->Arg(4)->Arg(8);

BENCHMARK_MAIN();
