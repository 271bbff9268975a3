#include "compdis/forest.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "compdis/rng.hpp"

namespace compdis::metrics {

namespace {

struct TreeBuilder {
  const std::vector<double>& X;
  int n, d, n_classes;
  const std::vector<int>& y;
  const ForestConfig& cfg;
  Rng& rng;
  std::vector<double>& importance;  // accumulated, un-normalized
  int n_root;

  double gini(const std::vector<int>& counts, int total) const {
    if (total == 0) return 0.0;
    double s = 0;
    for (int c : counts) {
      const double p = static_cast<double>(c) / total;
      s += p * p;
    }
    return 1.0 - s;
  }

  void build(std::vector<int>& idx, int lo, int hi, int depth) {
    const int m = hi - lo;
    std::vector<int> counts(static_cast<size_t>(n_classes), 0);
    for (int i = lo; i < hi; ++i) ++counts[static_cast<size_t>(y[static_cast<size_t>(idx[static_cast<size_t>(i)])])];
    const double node_imp = gini(counts, m);
    if (depth >= cfg.max_depth || m < 2 * cfg.min_leaf || node_imp <= 0.0) return;

    // random feature subset of size ceil(sqrt(d))
    const int k = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(d)))));
    std::vector<int> feats(static_cast<size_t>(d));
    for (int f = 0; f < d; ++f) feats[static_cast<size_t>(f)] = f;
    rng.shuffle(feats);
    feats.resize(static_cast<size_t>(k));

    double best_gain = 0.0;
    int best_f = -1;
    double best_thr = 0.0;
    std::vector<int> order(static_cast<size_t>(m));
    for (int f : feats) {
      for (int i = 0; i < m; ++i) order[static_cast<size_t>(i)] = idx[static_cast<size_t>(lo + i)];
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        return X[static_cast<size_t>(a) * d + f] < X[static_cast<size_t>(b) * d + f];
      });
      std::vector<int> left(static_cast<size_t>(n_classes), 0);
      std::vector<int> right = counts;
      for (int i = 0; i + 1 < m; ++i) {
        const int cls = y[static_cast<size_t>(order[static_cast<size_t>(i)])];
        ++left[static_cast<size_t>(cls)];
        --right[static_cast<size_t>(cls)];
        const double xv = X[static_cast<size_t>(order[static_cast<size_t>(i)]) * d + f];
        const double xn = X[static_cast<size_t>(order[static_cast<size_t>(i + 1)]) * d + f];
        if (xn <= xv) continue;  // no boundary between equal values
        const int nl = i + 1, nr = m - nl;
        if (nl < cfg.min_leaf || nr < cfg.min_leaf) continue;
        const double gain = node_imp - (static_cast<double>(nl) / m) * gini(left, nl) -
                            (static_cast<double>(nr) / m) * gini(right, nr);
        if (gain > best_gain + 1e-15) {
          best_gain = gain;
          best_f = f;
          best_thr = 0.5 * (xv + xn);
        }
      }
    }
    if (best_f < 0) return;

    importance[static_cast<size_t>(best_f)] += best_gain * static_cast<double>(m) / n_root;
    auto mid_it = std::partition(idx.begin() + lo, idx.begin() + hi, [&](int a) {
      return X[static_cast<size_t>(a) * d + best_f] <= best_thr;
    });
    const int mid = static_cast<int>(mid_it - idx.begin());
    build(idx, lo, mid, depth + 1);
    build(idx, mid, hi, depth + 1);
  }
};

}  // namespace

std::vector<double> forest_importance(const std::vector<double>& X, int n, int d,
                                      const std::vector<int>& y, int n_classes,
                                      const ForestConfig& cfg) {
  if (n < 2 || d < 1) throw std::invalid_argument("forest_importance: degenerate data");
  if (static_cast<size_t>(n) * d != X.size() || static_cast<size_t>(n) != y.size())
    throw std::invalid_argument("forest_importance: size mismatch");
  {
    const int first = y[0];
    bool varies = false;
    for (int v : y)
      if (v != first) { varies = true; break; }
    if (!varies) throw std::invalid_argument("forest_importance: constant target column");
  }
  Rng rng(cfg.seed);
  std::vector<double> acc(static_cast<size_t>(d), 0.0);
  for (int t = 0; t < cfg.trees; ++t) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (auto& i : idx) i = static_cast<int>(rng.uniform_u64(static_cast<uint64_t>(n)));  // bootstrap
    std::vector<double> imp(static_cast<size_t>(d), 0.0);
    TreeBuilder tb{X, n, d, n_classes, y, cfg, rng, imp, n};
    tb.build(idx, 0, n, 0);
    double total = 0;
    for (double v : imp) total += v;
    if (total > 0)
      for (int f = 0; f < d; ++f) acc[static_cast<size_t>(f)] += imp[static_cast<size_t>(f)] / total;
  }
  for (auto& v : acc) v /= cfg.trees;
  return acc;
}

}  // namespace compdis::metrics
