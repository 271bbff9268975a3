#pragma once

#include <set>
#include <vector>

#include "compdis/rng.hpp"

namespace compdis::support {

using Tuple = std::vector<int>;

// A finite factor world: K factors with small value domains and a non-empty
// support drawn from the product of the domains.
struct DiscreteWorld {
  int K = 1;
  std::vector<std::vector<int>> domains;  // per-factor value sets
  std::set<Tuple> support;

  void validate() const;
};

DiscreteWorld random_world(int max_k, int max_domain, Rng& rng);

// Least fixed point of index-subset exchange between tuple pairs (the
// two-image attribute mix applied to discrete factor tuples).
std::set<Tuple> pairwise_closure(const DiscreteWorld& world);

// Exploratory variant with unordered multiset exchange (object-style mixing);
// not covered by the equivalence theorem.
std::set<Tuple> pairwise_closure_object(const DiscreteWorld& world);

// Cartesian product of the per-factor marginal value sets observed in support.
std::set<Tuple> factorized_support(const DiscreteWorld& world);

struct EquivalenceReport {
  bool closed = false;      // closure(support) == support
  bool factorized = false;  // support == factorized_support(support)
  bool agree = false;       // closed <=> factorized
};

EquivalenceReport verify_equivalence(const DiscreteWorld& world);

}  // namespace compdis::support
