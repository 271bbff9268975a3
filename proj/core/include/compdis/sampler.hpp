#pragma once

#include "compdis/graph.hpp"
#include "compdis/rng.hpp"
#include "compdis/schedule.hpp"

namespace compdis::nets {

// A batched v-prediction model. `cond` is an optional (N,K,D) latent-set
// batch; pass an invalid Var for unconditional models.
struct Denoiser {
  virtual ~Denoiser() = default;
  virtual Var apply(Graph& g, Var x_t, const std::vector<int>& t, Var cond) = 0;
  // Frozen denoisers receive no gradient; the prior loss requires this.
  virtual bool frozen() const { return true; }
};

// Deterministic DDIM (eta = 0) from a seeded Gaussian through `steps` evenly
// spaced timesteps, in model domain. Only the final denoiser application is
// recorded on the tape; earlier iterations are treated as constants, so
// gradients reach the decoder parameters and the conditioning through the
// last step alone.
Var ddim_decode(Graph& g, Denoiser& dec, const NoiseSchedule& sched, Var cond, int batch,
                int channels, int height, int width, int steps, Rng& rng);

// The timestep ladder used by ddim_decode: `steps` values, descending from T.
std::vector<int> ddim_timesteps(int T, int steps);

}  // namespace compdis::nets
