#include "compdis/mixing.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace compdis::mixing {

using nlohmann::json;

Strategy strategy_from_string(const std::string& s) {
  if (s == "attribute" || s == "attr") return Strategy::Attribute;
  if (s == "object" || s == "obj") return Strategy::Object;
  if (s == "joint") return Strategy::Joint;
  throw std::invalid_argument("unknown mixing strategy: " + s);
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Attribute: return "attribute";
    case Strategy::Object: return "object";
    case Strategy::Joint: return "joint";
  }
  return "?";
}

void validate(const MixPlan& plan) {
  plan.layout.validate();
  const int K = plan.layout.K, M = plan.layout.M;
  if (static_cast<int>(plan.selections.size()) != K)
    throw std::invalid_argument("MixPlan: selection count != K");
  std::set<std::pair<int, int>> used_obj;
  for (int i = 0; i < K; ++i) {
    const Selection& s = plan.selections[static_cast<size_t>(i)];
    if (s.source != 1 && s.source != 2) throw std::invalid_argument("MixPlan: source must be 1 or 2");
    if (s.index < 0 || s.index >= K) throw std::invalid_argument("MixPlan: index out of range");
    if (i < M) {
      if (s.index != i) throw std::invalid_argument("MixPlan: attribute slot must keep its index");
    } else {
      if (s.index < M) throw std::invalid_argument("MixPlan: object slot uses attribute index");
      if (!used_obj.emplace(s.source, s.index).second)
        throw std::invalid_argument("MixPlan: repeated (source,index) in object block");
    }
  }
}

namespace {

// uniform subset of {lo..hi-1} of the given size, in sampled (random) order
std::vector<int> sample_subset(int lo, int hi, int size, Rng& rng) {
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(hi - lo));
  for (int i = lo; i < hi; ++i) idx.push_back(i);
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(size));
  return idx;
}

void fill_attr_block(MixPlan& plan, int lo, int hi, Rng& rng) {
  const int n = hi - lo;
  const int take = rng.uniform_int(0, n);  // |I| uniform on {0..n}
  std::vector<int> from1 = sample_subset(lo, hi, take, rng);
  std::vector<bool> is1(static_cast<size_t>(hi), false);
  for (int i : from1) is1[static_cast<size_t>(i)] = true;
  for (int i = lo; i < hi; ++i)
    plan.selections[static_cast<size_t>(i)] = {is1[static_cast<size_t>(i)] ? 1 : 2, i};
}

void fill_obj_block(MixPlan& plan, int lo, int hi, Rng& rng) {
  const int n = hi - lo;
  const int take1 = rng.uniform_int(0, n);  // |I1| uniform on {0..n}
  std::vector<int> i1 = sample_subset(lo, hi, take1, rng);
  std::vector<int> i2 = sample_subset(lo, hi, n - take1, rng);
  std::vector<Selection> sels;
  sels.reserve(static_cast<size_t>(n));
  for (int i : i1) sels.push_back({1, i});
  for (int i : i2) sels.push_back({2, i});
  rng.shuffle(sels);  // slot order carries no meaning for object factors
  for (int i = 0; i < n; ++i) plan.selections[static_cast<size_t>(lo + i)] = sels[static_cast<size_t>(i)];
}

}  // namespace

MixPlan sample_attr_plan(const FactorLayout& layout, Rng& rng) {
  layout.validate();
  if (layout.M != layout.K)
    throw std::invalid_argument("sample_attr_plan: requires a pure attribute layout (M == K)");
  MixPlan plan{layout, std::vector<Selection>(static_cast<size_t>(layout.K))};
  fill_attr_block(plan, 0, layout.K, rng);
  return plan;
}

MixPlan sample_obj_plan(const FactorLayout& layout, Rng& rng) {
  layout.validate();
  if (layout.M != 0)
    throw std::invalid_argument("sample_obj_plan: requires a pure object layout (M == 0)");
  MixPlan plan{layout, std::vector<Selection>(static_cast<size_t>(layout.K))};
  fill_obj_block(plan, 0, layout.K, rng);
  return plan;
}

MixPlan sample_joint_plan(const FactorLayout& layout, Rng& rng) {
  layout.validate();
  if (layout.M == layout.K) return sample_attr_plan(layout, rng);
  if (layout.M == 0) return sample_obj_plan(layout, rng);
  MixPlan plan{layout, std::vector<Selection>(static_cast<size_t>(layout.K))};
  fill_attr_block(plan, 0, layout.M, rng);
  fill_obj_block(plan, layout.M, layout.K, rng);
  return plan;
}

MixPlan sample_plan(Strategy s, const FactorLayout& layout, Rng& rng) {
  switch (s) {
    case Strategy::Attribute: return sample_attr_plan(layout, rng);
    case Strategy::Object: return sample_obj_plan(layout, rng);
    case Strategy::Joint: return sample_joint_plan(layout, rng);
  }
  throw std::logic_error("sample_plan: bad strategy");
}

LatentSet apply_mix(const LatentSet& z1, const LatentSet& z2, const MixPlan& plan) {
  validate(plan);
  if (!(z1.layout == plan.layout) || !(z2.layout == plan.layout))
    throw std::invalid_argument("apply_mix: layout mismatch");
  z1.validate();
  z2.validate();
  const int K = plan.layout.K, D = plan.layout.D;
  LatentSet out{Tensor({K, D}), plan.layout};
  for (int i = 0; i < K; ++i) {
    const Selection& s = plan.selections[static_cast<size_t>(i)];
    const Tensor& src = s.source == 1 ? z1.vectors : z2.vectors;
    std::copy(src.data() + static_cast<size_t>(s.index) * D,
              src.data() + static_cast<size_t>(s.index + 1) * D,
              out.vectors.data() + static_cast<size_t>(i) * D);
  }
  return out;
}

Var apply_mix_graph(Var z1, Var z2, const MixPlan& plan) {
  validate(plan);
  const int K = plan.layout.K, D = plan.layout.D;
  const auto check = [&](Var z) {
    if (z.val().rank() != 2 || z.val().dim(0) != K || z.val().dim(1) != D)
      throw std::invalid_argument("apply_mix_graph: latents must be (K,D)");
  };
  check(z1);
  check(z2);
  Var both = concat_rows(z1, z2);
  std::vector<int> idx(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) {
    const Selection& s = plan.selections[static_cast<size_t>(i)];
    idx[static_cast<size_t>(i)] = (s.source == 1 ? 0 : K) + s.index;
  }
  return gather_rows(both, idx);
}

std::string to_json(const MixPlan& plan) {
  json arr = json::array();
  for (const auto& s : plan.selections) arr.push_back({s.source, s.index + 1});
  return arr.dump();
}

MixPlan plan_from_json(const FactorLayout& layout, const std::string& text) {
  json arr = json::parse(text);
  MixPlan plan{layout, {}};
  for (const auto& e : arr) plan.selections.push_back({e.at(0).get<int>(), e.at(1).get<int>() - 1});
  validate(plan);
  return plan;
}

}  // namespace compdis::mixing
