#include "compdis/assignment.hpp"

#include <cmath>
#include <stdexcept>

namespace compdis::assign {

namespace {

void check_square_finite(const Tensor& cost, const char* who) {
  if (cost.rank() != 2 || cost.dim(0) != cost.dim(1) || cost.dim(0) < 1)
    throw std::invalid_argument(std::string(who) + ": cost must be square");
  if (!cost.all_finite()) throw std::invalid_argument(std::string(who) + ": non-finite cost");
}

double scaling_residual(const Tensor& logK, const Tensor& u, const Tensor& v) {
  const int K = logK.dim(0);
  double worst = 0.0;
  for (int r = 0; r < K; ++r) {
    double s = 0;
    for (int c = 0; c < K; ++c)
      s += std::exp(logK[static_cast<size_t>(r) * K + c] + u[static_cast<size_t>(r)] +
                    v[static_cast<size_t>(c)]);
    worst = std::max(worst, std::fabs(s - 1.0));
  }
  for (int c = 0; c < K; ++c) {
    double s = 0;
    for (int r = 0; r < K; ++r)
      s += std::exp(logK[static_cast<size_t>(r) * K + c] + u[static_cast<size_t>(r)] +
                    v[static_cast<size_t>(c)]);
    worst = std::max(worst, std::fabs(s - 1.0));
  }
  return worst;
}

}  // namespace

Var sinkhorn_graph(Var cost, const SinkhornConfig& cfg, double* residual_out, int* iters_out) {
  check_square_finite(cost.val(), "sinkhorn");
  if (!(cfg.epsilon > 0.0)) throw std::invalid_argument("sinkhorn: epsilon must be positive");
  Graph& g = *cost.g;
  const int K = cost.val().dim(0);
  Var logK = mul_scalar(cost, -1.0 / cfg.epsilon);
  Var u = g.constant(Tensor({K}));
  Var v = g.constant(Tensor({K}));
  int it = 0;
  double resid = scaling_residual(logK.val(), u.val(), v.val());
  while (it < cfg.max_iters && resid >= cfg.tol) {
    u = neg(lse_rows(add_rowvec(logK, v)));
    v = neg(lse_rows(transpose2d(add_colvec(logK, u))));
    ++it;
    resid = scaling_residual(logK.val(), u.val(), v.val());
  }
  if (residual_out) *residual_out = resid;
  if (iters_out) *iters_out = it;
  return vexp(add_rowvec(add_colvec(logK, u), v));
}

namespace {

// one log-domain sweep of the dual potentials (in cost units)
void scaling_sweep(const Tensor& cost, int K, double eps, std::vector<double>& u,
                   std::vector<double>& v) {
  for (int r = 0; r < K; ++r) {
    double m = -1e300;
    for (int c = 0; c < K; ++c)
      m = std::max(m, (-cost[static_cast<size_t>(r) * K + c] + v[static_cast<size_t>(c)]) / eps);
    double s = 0;
    for (int c = 0; c < K; ++c)
      s += std::exp((-cost[static_cast<size_t>(r) * K + c] + v[static_cast<size_t>(c)]) / eps - m);
    u[static_cast<size_t>(r)] = -eps * (m + std::log(s));
  }
  for (int c = 0; c < K; ++c) {
    double m = -1e300;
    for (int r = 0; r < K; ++r)
      m = std::max(m, (-cost[static_cast<size_t>(r) * K + c] + u[static_cast<size_t>(r)]) / eps);
    double s = 0;
    for (int r = 0; r < K; ++r)
      s += std::exp((-cost[static_cast<size_t>(r) * K + c] + u[static_cast<size_t>(r)]) / eps - m);
    v[static_cast<size_t>(c)] = -eps * (m + std::log(s));
  }
}

double duals_residual(const Tensor& cost, int K, double eps, const std::vector<double>& u,
                      const std::vector<double>& v) {
  double worst = 0;
  for (int r = 0; r < K; ++r) {
    double s = 0;
    for (int c = 0; c < K; ++c)
      s += std::exp((-cost[static_cast<size_t>(r) * K + c] + u[static_cast<size_t>(r)] +
                     v[static_cast<size_t>(c)]) /
                    eps);
    worst = std::max(worst, std::fabs(s - 1.0));
  }
  for (int c = 0; c < K; ++c) {
    double s = 0;
    for (int r = 0; r < K; ++r)
      s += std::exp((-cost[static_cast<size_t>(r) * K + c] + u[static_cast<size_t>(r)] +
                     v[static_cast<size_t>(c)]) /
                    eps);
    worst = std::max(worst, std::fabs(s - 1.0));
  }
  return worst;
}

}  // namespace

AssignmentMatrix sinkhorn(const Tensor& cost, double epsilon, int max_iters, double tol,
                          double anneal_from) {
  check_square_finite(cost, "sinkhorn");
  if (!(epsilon > 0.0)) throw std::invalid_argument("sinkhorn: epsilon must be positive");
  const int K = cost.dim(0);
  std::vector<double> u(static_cast<size_t>(K), 0.0), v(static_cast<size_t>(K), 0.0);
  AssignmentMatrix out;
  out.kind = AssignmentMatrix::Kind::Soft;
  out.iters = 0;
  if (anneal_from > epsilon) {
    for (double eps = anneal_from; eps > epsilon; eps = std::max(eps * 0.85, epsilon)) {
      int it = 0;
      while (it < 200 && duals_residual(cost, K, eps, u, v) >= tol) {
        scaling_sweep(cost, K, eps, u, v);
        ++it;
        ++out.iters;
      }
    }
  }
  while (out.iters < max_iters && duals_residual(cost, K, epsilon, u, v) >= tol) {
    scaling_sweep(cost, K, epsilon, u, v);
    ++out.iters;
  }
  out.residual = duals_residual(cost, K, epsilon, u, v);
  out.entries = Tensor({K, K});
  for (int r = 0; r < K; ++r)
    for (int c = 0; c < K; ++c)
      out.entries[static_cast<size_t>(r) * K + c] =
          std::exp((-cost[static_cast<size_t>(r) * K + c] + u[static_cast<size_t>(r)] +
                    v[static_cast<size_t>(c)]) /
                   epsilon);
  return out;
}

AssignmentMatrix hungarian(const Tensor& cost) {
  check_square_finite(cost, "hungarian");
  const int K = cost.dim(0);
  if (K > 20) throw std::invalid_argument("hungarian: K > 20 unsupported");
  const unsigned full = (1u << K) - 1u;
  // h[mask] = min cost of assigning the last popcount(mask) rows to `mask`
  std::vector<double> h(full + 1u, 0.0);
  for (unsigned mask = 1; mask <= full; ++mask) {
    const int m = __builtin_popcount(mask);
    const int r = K - m;
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < K; ++j)
      if ((mask >> j) & 1u)
        best = std::min(best, cost[static_cast<size_t>(r) * K + j] + h[mask ^ (1u << j)]);
    h[mask] = best;
  }
  AssignmentMatrix out;
  out.kind = AssignmentMatrix::Kind::Hard;
  out.entries = Tensor({K, K});
  out.perm.resize(static_cast<size_t>(K));
  unsigned remaining = full;
  for (int r = 0; r < K; ++r) {
    for (int j = 0; j < K; ++j) {
      if (!((remaining >> j) & 1u)) continue;
      // exact equality holds: h[remaining] was computed from these very terms
      if (cost[static_cast<size_t>(r) * K + j] + h[remaining ^ (1u << j)] == h[remaining]) {
        out.perm[static_cast<size_t>(r)] = j;
        out.entries[static_cast<size_t>(r) * K + j] = 1.0;
        remaining ^= 1u << j;
        break;
      }
    }
  }
  return out;
}

}  // namespace compdis::assign
