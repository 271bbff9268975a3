#pragma once

#include <vector>

#include "compdis/graph.hpp"
#include "compdis/tensor.hpp"

namespace compdis::assign {

struct AssignmentMatrix {
  enum class Kind { Soft, Hard };
  Tensor entries;  // (K,K), doubly stochastic (Soft) or 0/1 permutation (Hard)
  Kind kind = Kind::Soft;
  double residual = 0.0;       // max |row/col sum - 1| at exit (Soft)
  int iters = 0;               // scaling iterations run (Soft)
  std::vector<int> perm;       // perm[row] = column (Hard)
};

struct SinkhornConfig {
  double epsilon = 0.05;
  int max_iters = 100;
  double tol = 1e-6;
};

// Log-domain Sinkhorn-Knopp scaling of exp(-cost/epsilon) to unit row and
// column sums. Non-convergence is reported through `residual`, never thrown.
// `anneal_from` > epsilon warm-starts the duals through a geometric epsilon
// ladder before the target-epsilon loop; the fixed point is unchanged but
// small-epsilon solves converge far faster.
AssignmentMatrix sinkhorn(const Tensor& cost, double epsilon, int max_iters = 100, double tol = 1e-6,
                          double anneal_from = 0.0);

// Differentiable variant used inside the consistency loss; gradients flow
// through the final iterate. Residual/iteration diagnostics are optional.
Var sinkhorn_graph(Var cost, const SinkhornConfig& cfg, double* residual_out = nullptr,
                   int* iters_out = nullptr);

// Exact minimum-total-cost permutation (assignment over all K! choices via
// subset DP); ties resolved to the lexicographically smallest permutation.
AssignmentMatrix hungarian(const Tensor& cost);

}  // namespace compdis::assign
