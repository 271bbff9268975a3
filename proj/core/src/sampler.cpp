#include "compdis/sampler.hpp"

#include <cmath>
#include <stdexcept>

namespace compdis::nets {

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1) throw std::invalid_argument("ddim_timesteps: steps must be >= 1");
  if (steps > T) throw std::invalid_argument("ddim_timesteps: steps exceed schedule length");
  std::vector<int> ts(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    // descending: T, T*(S-1)/S, ..., T/S
    ts[static_cast<size_t>(i)] =
        static_cast<int>(std::llround(static_cast<double>(T) * (steps - i) / steps));
    if (ts[static_cast<size_t>(i)] < 1) ts[static_cast<size_t>(i)] = 1;
  }
  return ts;
}

Var ddim_decode(Graph& g, Denoiser& dec, const NoiseSchedule& sched, Var cond, int batch,
                int channels, int height, int width, int steps, Rng& rng) {
  const auto ts = ddim_timesteps(sched.T(), steps);
  Tensor x = Tensor::randn({batch, channels, height, width}, rng);

  // all but the last iteration run without the tape
  for (size_t i = 0; i + 1 < ts.size(); ++i) {
    const int t = ts[i];
    const int t_next = ts[i + 1];
    Graph::NoGrad ng(g);
    Var xv = g.constant(x);
    Var v = dec.apply(g, xv, std::vector<int>(static_cast<size_t>(batch), t), cond);
    const Tensor& vt = v.val();
    Tensor x0(x.shape()), eps(x.shape());
    const double sab = sched.sqrt_alpha_bar(t), sig = sched.sigma(t);
    for (size_t k = 0; k < x.numel(); ++k) {
      x0[k] = sab * x[k] - sig * vt[k];
      eps[k] = sab * vt[k] + sig * x[k];
    }
    const double sab_n = sched.sqrt_alpha_bar(t_next), sig_n = sched.sigma(t_next);
    for (size_t k = 0; k < x.numel(); ++k) x[k] = sab_n * x0[k] + sig_n * eps[k];
  }

  // final application on the tape; the step to t=0 keeps only x0_hat
  const int t_last = ts.back();
  Var xv = g.constant(x);
  Var v = dec.apply(g, xv, std::vector<int>(static_cast<size_t>(batch), t_last), cond);
  Tensor scaled_xt = x;
  scaled_xt.scale_(sched.sqrt_alpha_bar(t_last));
  return sub(g.constant(scaled_xt), mul_scalar(v, sched.sigma(t_last)));
}

}  // namespace compdis::nets
