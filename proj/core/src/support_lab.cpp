#include "compdis/support_lab.hpp"

#include <algorithm>
#include <stdexcept>

namespace compdis::support {

void DiscreteWorld::validate() const {
  if (K < 1 || static_cast<int>(domains.size()) != K)
    throw std::invalid_argument("DiscreteWorld: need K >= 1 domains");
  for (const auto& d : domains)
    if (d.empty()) throw std::invalid_argument("DiscreteWorld: empty factor domain");
  if (support.empty()) throw std::invalid_argument("DiscreteWorld: empty support");
  for (const auto& t : support) {
    if (static_cast<int>(t.size()) != K) throw std::invalid_argument("DiscreteWorld: tuple arity != K");
    for (int i = 0; i < K; ++i) {
      const auto& d = domains[static_cast<size_t>(i)];
      if (std::find(d.begin(), d.end(), t[static_cast<size_t>(i)]) == d.end())
        throw std::invalid_argument("DiscreteWorld: tuple value outside its domain");
    }
  }
}

DiscreteWorld random_world(int max_k, int max_domain, Rng& rng) {
  DiscreteWorld w;
  w.K = rng.uniform_int(1, max_k);
  w.domains.resize(static_cast<size_t>(w.K));
  for (auto& d : w.domains) {
    const int size = rng.uniform_int(1, max_domain);
    for (int v = 0; v < size; ++v) d.push_back(v);
  }
  // enumerate the full product, keep each tuple with a random density
  const double density = 0.15 + 0.75 * rng.uniform();
  std::vector<Tuple> all;
  Tuple cur(static_cast<size_t>(w.K), 0);
  while (true) {
    all.push_back(cur);
    int i = w.K - 1;
    for (; i >= 0; --i) {
      if (++cur[static_cast<size_t>(i)] < static_cast<int>(w.domains[static_cast<size_t>(i)].size()))
        break;
      cur[static_cast<size_t>(i)] = 0;
    }
    if (i < 0) break;
  }
  for (const auto& t : all)
    if (rng.uniform() < density) w.support.insert(t);
  if (w.support.empty()) w.support.insert(all[rng.uniform_u64(all.size())]);
  // shrink domains to observed values so marginals match the domain lists? No:
  // keep declared domains; marginals are computed from the support itself.
  w.validate();
  return w;
}

std::set<Tuple> pairwise_closure(const DiscreteWorld& world) {
  world.validate();
  const int K = world.K;
  std::set<Tuple> closed = world.support;
  std::vector<Tuple> frontier(closed.begin(), closed.end());
  // worklist: only pairs involving at least one new tuple can add anything
  while (!frontier.empty()) {
    std::vector<Tuple> fresh;
    std::vector<Tuple> all(closed.begin(), closed.end());
    for (const Tuple& a : frontier)
      for (const Tuple& b : all)
        for (int order = 0; order < 2; ++order) {
          const Tuple& t1 = order == 0 ? a : b;
          const Tuple& t2 = order == 0 ? b : a;
          for (unsigned mask = 0; mask < (1u << K); ++mask) {
            Tuple out(static_cast<size_t>(K));
            for (int i = 0; i < K; ++i)
              out[static_cast<size_t>(i)] =
                  (mask >> i) & 1u ? t1[static_cast<size_t>(i)] : t2[static_cast<size_t>(i)];
            if (closed.insert(out).second) fresh.push_back(std::move(out));
          }
        }
    frontier = std::move(fresh);
  }
  return closed;
}

std::set<Tuple> pairwise_closure_object(const DiscreteWorld& world) {
  world.validate();
  const int K = world.K;
  auto canon = [](Tuple t) {
    std::sort(t.begin(), t.end());
    return t;
  };
  std::set<Tuple> closed;
  for (const auto& t : world.support) closed.insert(canon(t));
  bool grew = true;
  while (grew) {
    grew = false;
    std::vector<Tuple> all(closed.begin(), closed.end());
    for (const Tuple& a : all)
      for (const Tuple& b : all) {
        // choose k elements from a (as an index subset) and K-k from b
        for (unsigned ma = 0; ma < (1u << K); ++ma) {
          const int ka = __builtin_popcount(ma);
          for (unsigned mb = 0; mb < (1u << K); ++mb) {
            if (__builtin_popcount(mb) != K - ka) continue;
            Tuple out;
            out.reserve(static_cast<size_t>(K));
            for (int i = 0; i < K; ++i)
              if ((ma >> i) & 1u) out.push_back(a[static_cast<size_t>(i)]);
            for (int i = 0; i < K; ++i)
              if ((mb >> i) & 1u) out.push_back(b[static_cast<size_t>(i)]);
            if (closed.insert(canon(std::move(out))).second) grew = true;
          }
        }
      }
  }
  return closed;
}

std::set<Tuple> factorized_support(const DiscreteWorld& world) {
  world.validate();
  const int K = world.K;
  std::vector<std::vector<int>> marginals(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) {
    std::set<int> vals;
    for (const auto& t : world.support) vals.insert(t[static_cast<size_t>(i)]);
    marginals[static_cast<size_t>(i)].assign(vals.begin(), vals.end());
  }
  std::set<Tuple> out;
  Tuple cur(static_cast<size_t>(K));
  std::vector<size_t> pos(static_cast<size_t>(K), 0);
  while (true) {
    for (int i = 0; i < K; ++i)
      cur[static_cast<size_t>(i)] = marginals[static_cast<size_t>(i)][pos[static_cast<size_t>(i)]];
    out.insert(cur);
    int i = K - 1;
    for (; i >= 0; --i) {
      if (++pos[static_cast<size_t>(i)] < marginals[static_cast<size_t>(i)].size()) break;
      pos[static_cast<size_t>(i)] = 0;
    }
    if (i < 0) break;
  }
  return out;
}

EquivalenceReport verify_equivalence(const DiscreteWorld& world) {
  EquivalenceReport r;
  const auto closure = pairwise_closure(world);
  const auto product = factorized_support(world);
  r.closed = closure == world.support;
  r.factorized = product == world.support;
  r.agree = r.closed == r.factorized;
  return r;
}

}  // namespace compdis::support
