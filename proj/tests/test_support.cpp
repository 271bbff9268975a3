#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "compdis/support_lab.hpp"

using namespace compdis;
using namespace compdis::support;

namespace {

DiscreteWorld world_2x2(std::set<Tuple> support) {
  DiscreteWorld w;
  w.K = 2;
  w.domains = {{0, 1}, {0, 1}};
  w.support = std::move(support);
  return w;
}

}  // namespace

TEST_CASE("closure: singleton is a fixed point") {
  auto w = world_2x2({{0, 0}});
  CHECK(pairwise_closure(w) == w.support);
}

TEST_CASE("closure: diagonal support fills the square") {
  auto w = world_2x2({{0, 0}, {1, 1}});
  const std::set<Tuple> all = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  CHECK(pairwise_closure(w) == all);
}

TEST_CASE("closure: product support is already closed") {
  auto w = world_2x2({{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  CHECK(pairwise_closure(w) == w.support);
}

TEST_CASE("factorized_support examples") {
  CHECK(factorized_support(world_2x2({{0, 0}, {1, 1}})) ==
        std::set<Tuple>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  CHECK(factorized_support(world_2x2({{1, 0}})) == std::set<Tuple>{{1, 0}});
  auto full = world_2x2({{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  CHECK(factorized_support(full) == full.support);
}

TEST_CASE("equivalence holds on random worlds") {
  Rng rng(2024);
  for (int i = 0; i < 80; ++i) {
    const auto w = random_world(4, 3, rng);
    const auto report = verify_equivalence(w);
    CHECK(report.agree);
    // the closure reaches exactly the factorized support
    CHECK(pairwise_closure(w) == factorized_support(w));
  }
}

TEST_CASE("closure idempotence and sandwiching") {
  Rng rng(77);
  for (int i = 0; i < 30; ++i) {
    const auto w = random_world(3, 3, rng);
    const auto c1 = pairwise_closure(w);
    DiscreteWorld w2 = w;
    w2.support = c1;
    CHECK(pairwise_closure(w2) == c1);  // idempotent
    const auto prod = factorized_support(w);
    for (const auto& t : w.support) CHECK(c1.count(t) == 1);
    for (const auto& t : c1) CHECK(prod.count(t) == 1);
  }
}

TEST_CASE("non-factorized support is not closed") {
  auto w = world_2x2({{0, 0}, {1, 1}});  // marginals full, support not
  const auto r = verify_equivalence(w);
  CHECK_FALSE(r.closed);
  CHECK_FALSE(r.factorized);
  CHECK(r.agree);
}

TEST_CASE("object-style closure is defined and monotone") {
  DiscreteWorld w;
  w.K = 2;
  w.domains = {{0, 1, 2}, {0, 1, 2}};
  w.support = {{0, 1}, {2, 2}};
  const auto c = pairwise_closure_object(w);
  // canonical (sorted) inputs are present
  CHECK(c.count({0, 1}) == 1);
  CHECK(c.count({2, 2}) == 1);
  // exchange can pick both elements from different tuples
  CHECK(c.count({0, 2}) == 1);
  CHECK(c.size() >= 4);
}

TEST_CASE("world validation") {
  DiscreteWorld w;
  w.K = 2;
  w.domains = {{0}, {0}};
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);  // empty support
  w.support = {{0, 5}};
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);  // value outside domain
}
