#include "compdis/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace compdis::nets {

NoiseSchedule::NoiseSchedule(ScheduleConfig cfg) : cfg_(cfg) {
  if (cfg_.T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
  if (!(cfg_.beta_start > 0.0 && cfg_.beta_start <= cfg_.beta_end && cfg_.beta_end < 1.0))
    throw std::invalid_argument("NoiseSchedule: need 0 < beta_start <= beta_end < 1");
  beta_.resize(static_cast<size_t>(cfg_.T) + 1, 0.0);
  alpha_bar_.resize(static_cast<size_t>(cfg_.T) + 1, 1.0);
  sqrt_alpha_bar_.resize(static_cast<size_t>(cfg_.T) + 1, 1.0);
  sigma_.resize(static_cast<size_t>(cfg_.T) + 1, 0.0);
  double prod = 1.0;
  for (int t = 1; t <= cfg_.T; ++t) {
    const double frac = cfg_.T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(cfg_.T - 1);
    const double b = cfg_.beta_start + (cfg_.beta_end - cfg_.beta_start) * frac;
    beta_[static_cast<size_t>(t)] = b;
    prod *= 1.0 - b;
    alpha_bar_[static_cast<size_t>(t)] = prod;
    sqrt_alpha_bar_[static_cast<size_t>(t)] = std::sqrt(prod);
    sigma_[static_cast<size_t>(t)] = std::sqrt(1.0 - prod);
    if (!(alpha_bar_[static_cast<size_t>(t)] < alpha_bar_[static_cast<size_t>(t - 1)]))
      throw std::runtime_error("NoiseSchedule: alpha_bar not strictly decreasing");
  }
}

void NoiseSchedule::check_t(int t, int lo) const {
  if (t < lo || t > cfg_.T) throw std::invalid_argument("NoiseSchedule: timestep out of range");
}

double NoiseSchedule::beta(int t) const {
  check_t(t, 1);
  return beta_[static_cast<size_t>(t)];
}
double NoiseSchedule::alpha_bar(int t) const {
  check_t(t, 0);
  return alpha_bar_[static_cast<size_t>(t)];
}
double NoiseSchedule::sqrt_alpha_bar(int t) const {
  check_t(t, 0);
  return sqrt_alpha_bar_[static_cast<size_t>(t)];
}
double NoiseSchedule::sigma(int t) const {
  check_t(t, 0);
  return sigma_[static_cast<size_t>(t)];
}

namespace {

// out = a*x + b*y elementwise, shapes already checked
Tensor lincomb(const Tensor& x, double a, const Tensor& y, double b) {
  Tensor out(x.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

Tensor lincomb_per_sample(const Tensor& x, const std::vector<double>& a, const Tensor& y,
                          const std::vector<double>& b) {
  Tensor out(x.shape());
  const int N = x.dim(0);
  const size_t stride = x.numel() / static_cast<size_t>(N);
  for (int n = 0; n < N; ++n) {
    const size_t off = static_cast<size_t>(n) * stride;
    for (size_t i = 0; i < stride; ++i) out[off + i] = a[static_cast<size_t>(n)] * x[off + i] +
                                                       b[static_cast<size_t>(n)] * y[off + i];
  }
  return out;
}

void check_pair(const Tensor& x, const Tensor& y, const char* what) {
  if (!x.same_shape(y)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

std::pair<std::vector<double>, std::vector<double>> coeffs(const std::vector<int>& t,
                                                           const NoiseSchedule& sched) {
  std::vector<double> sab(t.size()), sig(t.size());
  for (size_t i = 0; i < t.size(); ++i) {
    sab[i] = sched.sqrt_alpha_bar(t[i]);
    sig[i] = sched.sigma(t[i]);
  }
  return {sab, sig};
}

}  // namespace

Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_pair(x0, eps, "add_noise");
  return lincomb(x0, sched.sqrt_alpha_bar(t), eps, sched.sigma(t));
}

Tensor add_noise(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                 const NoiseSchedule& sched) {
  check_pair(x0, eps, "add_noise");
  if (static_cast<size_t>(x0.dim(0)) != t.size()) throw std::invalid_argument("add_noise: batch/t mismatch");
  auto [sab, sig] = coeffs(t, sched);
  return lincomb_per_sample(x0, sab, eps, sig);
}

Tensor v_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched) {
  check_pair(x0, eps, "v_target");
  return lincomb(eps, sched.sqrt_alpha_bar(t), x0, -sched.sigma(t));
}

Tensor v_target(const Tensor& x0, const Tensor& eps, const std::vector<int>& t,
                const NoiseSchedule& sched) {
  check_pair(x0, eps, "v_target");
  if (static_cast<size_t>(x0.dim(0)) != t.size()) throw std::invalid_argument("v_target: batch/t mismatch");
  auto [sab, sig] = coeffs(t, sched);
  for (auto& s : sig) s = -s;
  return lincomb_per_sample(eps, sab, x0, sig);
}

Tensor eps_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched) {
  check_pair(x_t, v, "eps_from_v");
  return lincomb(v, sched.sqrt_alpha_bar(t), x_t, sched.sigma(t));
}

Tensor eps_from_v(const Tensor& x_t, const Tensor& v, const std::vector<int>& t,
                  const NoiseSchedule& sched) {
  check_pair(x_t, v, "eps_from_v");
  if (static_cast<size_t>(x_t.dim(0)) != t.size()) throw std::invalid_argument("eps_from_v: batch/t mismatch");
  auto [sab, sig] = coeffs(t, sched);
  return lincomb_per_sample(v, sab, x_t, sig);
}

Tensor x0_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched) {
  check_pair(x_t, v, "x0_from_v");
  return lincomb(x_t, sched.sqrt_alpha_bar(t), v, -sched.sigma(t));
}

Tensor x0_from_v(const Tensor& x_t, const Tensor& v, const std::vector<int>& t,
                 const NoiseSchedule& sched) {
  check_pair(x_t, v, "x0_from_v");
  if (static_cast<size_t>(x_t.dim(0)) != t.size()) throw std::invalid_argument("x0_from_v: batch/t mismatch");
  auto [sab, sig] = coeffs(t, sched);
  for (auto& s : sig) s = -s;
  return lincomb_per_sample(x_t, sab, v, sig);
}

}  // namespace compdis::nets
