#pragma once

#include <cstdint>
#include <vector>

namespace compdis::metrics {

struct ForestConfig {
  int trees = 20;
  int max_depth = 8;
  int min_leaf = 2;
  uint64_t seed = 0;
};

// Gini CART forest on a discrete target; returns mean-decrease-in-impurity
// feature importances, normalized per tree and averaged (sums to ~1 unless
// the forest never splits).
std::vector<double> forest_importance(const std::vector<double>& X, int n, int d,
                                      const std::vector<int>& y, int n_classes,
                                      const ForestConfig& cfg);

}  // namespace compdis::metrics
