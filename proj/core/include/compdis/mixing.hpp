#pragma once

#include <string>
#include <vector>

#include "compdis/graph.hpp"
#include "compdis/layout.hpp"
#include "compdis/rng.hpp"

namespace compdis::mixing {

enum class Strategy { Attribute, Object, Joint };

Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);

// One output slot: take row `index` (0-based) of latent set `source` (1 or 2).
struct Selection {
  int source = 1;
  int index = 0;
};

// A validated per-slot selection. Attribute slots keep their own index and
// differ only in source; object slots may take any object-block index from
// either input, each (source,index) pair at most once.
struct MixPlan {
  FactorLayout layout;
  std::vector<Selection> selections;
};

// Throws std::invalid_argument on any invariant violation.
void validate(const MixPlan& plan);

MixPlan sample_attr_plan(const FactorLayout& layout, Rng& rng);   // requires M == K
MixPlan sample_obj_plan(const FactorLayout& layout, Rng& rng);    // requires M == 0
MixPlan sample_joint_plan(const FactorLayout& layout, Rng& rng);  // any M (degenerate M falls back)
MixPlan sample_plan(Strategy s, const FactorLayout& layout, Rng& rng);

LatentSet apply_mix(const LatentSet& z1, const LatentSet& z2, const MixPlan& plan);

// Differentiable variant: z1, z2 are (K,D) vars sharing plan.layout.
Var apply_mix_graph(Var z1, Var z2, const MixPlan& plan);

// Debug dump format: JSON list of [source, src_index] pairs, 1-based indices.
std::string to_json(const MixPlan& plan);
MixPlan plan_from_json(const FactorLayout& layout, const std::string& json);

}  // namespace compdis::mixing
