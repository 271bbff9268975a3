#pragma once

#include <vector>

#include "compdis/tensor.hpp"

namespace compdis::nets {

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

// Linear beta schedule with cumulative-product alpha_bar, sigma_t =
// sqrt(1 - alpha_bar_t), and the sigma^2 weight table used by the prior loss.
// Index convention: t runs 1..T; alpha_bar(0) == 1 and sigma(0) == 0.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(ScheduleConfig cfg = {});

  int T() const { return cfg_.T; }
  const ScheduleConfig& config() const { return cfg_; }

  double beta(int t) const;            // t in 1..T
  double alpha_bar(int t) const;       // t in 0..T
  double sqrt_alpha_bar(int t) const;  // t in 0..T
  double sigma(int t) const;           // t in 0..T
  double weight_sigma2(int t) const { return sigma(t) * sigma(t); }

 private:
  void check_t(int t, int lo) const;
  ScheduleConfig cfg_;
  std::vector<double> beta_, alpha_bar_, sqrt_alpha_bar_, sigma_;
};

// Forward process and v-parameterization algebra. Single-timestep variants
// apply one t to the whole tensor; vector variants apply t[n] to sample n of
// an (N,...) batch.
Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
Tensor add_noise(const Tensor& x0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& sched);
Tensor v_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched);
Tensor v_target(const Tensor& x0, const Tensor& eps, const std::vector<int>& t, const NoiseSchedule& sched);
Tensor eps_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched);
Tensor eps_from_v(const Tensor& x_t, const Tensor& v, const std::vector<int>& t, const NoiseSchedule& sched);
Tensor x0_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched);
Tensor x0_from_v(const Tensor& x_t, const Tensor& v, const std::vector<int>& t, const NoiseSchedule& sched);

}  // namespace compdis::nets
