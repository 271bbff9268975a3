#pragma once

#include <vector>

#include "compdis/assignment.hpp"
#include "compdis/graph.hpp"
#include "compdis/layout.hpp"
#include "compdis/mixing.hpp"
#include "compdis/nets.hpp"
#include "compdis/rng.hpp"
#include "compdis/sampler.hpp"
#include "compdis/schedule.hpp"

namespace compdis::losses {

struct LossConfig {
  double lambda_prior = 1.0;
  double lambda_con = 0.01;
  double tau = 0.1;  // InfoNCE temperature
  double t_min_frac = 0.02;
  double t_max_frac = 0.98;
  assign::SinkhornConfig sinkhorn;
  bool detach_assignment = false;
  // Eq-as-printed denominator (negatives only); default adds the positive
  // term, which keeps the loss non-negative.
  bool strict_paper_denominator = false;
  enum class ReconWeight { One, Sigma2 };
  ReconWeight recon_weight = ReconWeight::One;
  int decode_steps = 2;

  void validate() const;
};

// Denoising reconstruction objective: mean over the batch of
// w_t * mean((prediction - v_target)^2) with per-sample uniform t,
// conditioning on the encoded latents. If `latents_out` is non-null the
// (B*K, D) encoding is returned for reuse.
Var recon_loss(Graph& g, const Tensor& x, nets::LatentEncoder& enc, nets::Denoiser& dec,
               const nets::NoiseSchedule& sched, Rng& rng, const LossConfig& cfg,
               Var* latents_out = nullptr);

// Same objective starting from pre-computed latents.
Var recon_from_latents(Graph& g, const Tensor& x, Var latents, nets::Denoiser& dec,
                       const nets::NoiseSchedule& sched, Rng& rng, const LossConfig& cfg);

// Score-distillation surrogate: a scalar whose gradient w.r.t. anything
// feeding `xc` equals mean_n w_t (eps_hat - eps) . dxc/dtheta. Its value is
// not meaningful; only the gradient is contractual. The prior must be frozen
// and receives no gradient. Returns the batch-mean residual norm through
// `residual_norm_out` when provided.
Var prior_loss_surrogate(Graph& g, Var xc, nets::Denoiser& prior, const nets::NoiseSchedule& sched,
                         Rng& rng, const LossConfig& cfg, double* residual_norm_out = nullptr);

// Similarity in [-1,1] between two latent sets: attribute slots compare
// index-aligned cosines, object slots use a Sinkhorn soft assignment over the
// cosine matrix; block scores average weighted by block size.
Var set_similarity(Var zhat, Var z, const FactorLayout& layout, const assign::SinkhornConfig& cfg,
                   bool detach_assignment = false);

// InfoNCE over set similarities: positive is (zhat_c[n], zc[n]); negatives
// are the B per-image latents of the batch.
Var consistency_loss(const std::vector<Var>& zhat_c, const std::vector<Var>& zc,
                     const std::vector<Var>& negatives, const FactorLayout& layout,
                     const LossConfig& cfg);

struct StepStats {
  double recon = 0.0;
  double consistency = 0.0;
  double prior_surrogate = 0.0;
  double prior_residual_norm = 0.0;
  double total = 0.0;
  double enc_grad_norm = 0.0;
  double dec_grad_norm = 0.0;
};

struct TotalLossOptions {
  mixing::Strategy strategy = mixing::Strategy::Attribute;
  FactorLayout layout;
  LossConfig cfg;
  bool disable_prior = false;
  bool disable_con = false;
};

// One full training-step objective over a batch in model domain. Builds the
// shared graph (encode -> recon; rotate-pair -> mix -> decode -> prior
// surrogate; re-encode -> consistency), then runs two routed backward passes:
// reconstruction into encoder+decoder grads, prior+consistency into encoder
// grads only. The prior is never differentiated. Throws std::runtime_error if
// any component is non-finite.
StepStats total_loss(const Tensor& x, nets::LatentEncoder& enc, nets::UNet& dec, nets::Denoiser* prior,
                     const nets::NoiseSchedule& sched, const TotalLossOptions& opt, Rng& rng);

}  // namespace compdis::losses
