#include "compdis/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace compdis::losses {

void LossConfig::validate() const {
  if (lambda_prior < 0 || lambda_con < 0) throw std::invalid_argument("LossConfig: lambdas must be >= 0");
  if (!(tau > 0)) throw std::invalid_argument("LossConfig: tau must be positive");
  if (!(t_min_frac >= 0 && t_min_frac < t_max_frac && t_max_frac <= 1.0))
    throw std::invalid_argument("LossConfig: bad prior t-range");
  if (decode_steps < 1 || decode_steps > 4)
    throw std::invalid_argument("LossConfig: decode_steps must be in 1..4");
}

namespace {

std::vector<int> draw_timesteps(int batch, int lo, int hi, Rng& rng) {
  std::vector<int> t(static_cast<size_t>(batch));
  for (auto& v : t) v = rng.uniform_int(lo, hi);
  return t;
}

Var per_sample_mse(Graph& g, Var pred, const Tensor& target, const std::vector<double>& w) {
  const int B = pred.val().dim(0);
  const int S = static_cast<int>(pred.val().numel()) / B;
  Var diff = sub(pred, g.constant(target));
  Var sq = mul(diff, diff);
  Var ps = mul_scalar(row_sum(reshape(sq, {B, S})), 1.0 / S);  // (B)
  Var wv = g.constant(Tensor::from({B}, std::vector<double>(w)));
  return mul_scalar(sum_all(mul(ps, wv)), 1.0 / B);
}

}  // namespace

Var recon_from_latents(Graph& g, const Tensor& x, Var latents, nets::Denoiser& dec,
                       const nets::NoiseSchedule& sched, Rng& rng, const LossConfig& cfg) {
  const int B = x.dim(0), K = latents.val().dim(0) / B, D = latents.val().dim(1);
  const auto t = draw_timesteps(B, 1, sched.T(), rng);
  Tensor eps = Tensor::randn(x.shape(), rng);
  Tensor x_t = nets::add_noise(x, t, eps, sched);
  Tensor target = nets::v_target(x, eps, t, sched);
  Var pred = dec.apply(g, g.constant(x_t), t, reshape(latents, {B, K, D}));
  std::vector<double> w(static_cast<size_t>(B), 1.0);
  if (cfg.recon_weight == LossConfig::ReconWeight::Sigma2)
    for (int n = 0; n < B; ++n) w[static_cast<size_t>(n)] = sched.weight_sigma2(t[static_cast<size_t>(n)]);
  return per_sample_mse(g, pred, target, w);
}

Var recon_loss(Graph& g, const Tensor& x, nets::LatentEncoder& enc, nets::Denoiser& dec,
               const nets::NoiseSchedule& sched, Rng& rng, const LossConfig& cfg, Var* latents_out) {
  Var z = enc.forward(g, g.constant(x));
  if (latents_out) *latents_out = z;
  return recon_from_latents(g, x, z, dec, sched, rng, cfg);
}

Var prior_loss_surrogate(Graph& g, Var xc, nets::Denoiser& prior, const nets::NoiseSchedule& sched,
                         Rng& rng, const LossConfig& cfg, double* residual_norm_out) {
  if (!prior.frozen())
    throw std::invalid_argument("prior_loss_surrogate: prior must be frozen");
  const int B = xc.val().dim(0);
  const int t_lo = std::max(1, static_cast<int>(std::lround(cfg.t_min_frac * sched.T())));
  const int t_hi = std::max(t_lo, std::min(sched.T(), static_cast<int>(std::lround(cfg.t_max_frac * sched.T()))));
  const auto t = draw_timesteps(B, t_lo, t_hi, rng);
  Tensor eps = Tensor::randn(xc.val().shape(), rng);
  Tensor x_t = nets::add_noise(xc.val(), t, eps, sched);
  Tensor v;
  {
    Graph::NoGrad ng(g);
    v = prior.apply(g, g.constant(x_t), t, Var{}).val();
  }
  Tensor eps_hat = nets::eps_from_v(x_t, v, t, sched);
  // residual = w_t * (eps_hat - eps), detached by construction
  Tensor resid(eps.shape());
  const size_t stride = eps.numel() / static_cast<size_t>(B);
  double norm_acc = 0.0;
  for (int n = 0; n < B; ++n) {
    const double w = sched.weight_sigma2(t[static_cast<size_t>(n)]);
    double nn = 0.0;
    for (size_t i = static_cast<size_t>(n) * stride; i < static_cast<size_t>(n + 1) * stride; ++i) {
      resid[i] = w * (eps_hat[i] - eps[i]);
      nn += resid[i] * resid[i];
    }
    norm_acc += std::sqrt(nn);
  }
  if (residual_norm_out) *residual_norm_out = norm_acc / B;
  return mul_scalar(dot_all(g.constant(resid), xc), 1.0 / B);
}

Var set_similarity(Var zhat, Var z, const FactorLayout& layout, const assign::SinkhornConfig& cfg,
                   bool detach_assignment) {
  layout.validate();
  Graph& g = *zhat.g;
  const int K = layout.K, M = layout.M, Ko = layout.object_slots();
  const auto check = [&](Var v) {
    if (v.val().rank() != 2 || v.val().dim(0) != K || v.val().dim(1) != layout.D)
      throw std::invalid_argument("set_similarity: latents must be (K,D)");
  };
  check(zhat);
  check(z);

  Var attr_score, obj_score;
  if (M > 0) {
    Var ah = l2_normalize_rows(slice_rows(zhat, 0, M));
    Var az = l2_normalize_rows(slice_rows(z, 0, M));
    attr_score = mul_scalar(sum_all(row_sum(mul(ah, az))), 1.0 / M);
  }
  if (Ko > 0) {
    Var oh = slice_rows(zhat, M, K);
    Var oz = slice_rows(z, M, K);
    Var cosm = cosine_matrix(oh, oz);
    Var assignment = assign::sinkhorn_graph(add_scalar(neg(cosm), 1.0), cfg);
    if (detach_assignment) assignment = detach(assignment);
    obj_score = mul_scalar(sum_all(mul(assignment, cosm)), 1.0 / Ko);
  }
  if (M == 0) return obj_score;
  if (Ko == 0) return attr_score;
  return add(mul_scalar(attr_score, static_cast<double>(M) / K),
             mul_scalar(obj_score, static_cast<double>(Ko) / K));
  (void)g;
}

Var consistency_loss(const std::vector<Var>& zhat_c, const std::vector<Var>& zc,
                     const std::vector<Var>& negatives, const FactorLayout& layout,
                     const LossConfig& cfg) {
  if (zhat_c.empty() || zhat_c.size() != zc.size())
    throw std::invalid_argument("consistency_loss: batch mismatch");
  if (negatives.empty()) throw std::invalid_argument("consistency_loss: empty negative set");
  Graph& g = *zhat_c[0].g;
  const double inv_tau = 1.0 / cfg.tau;
  Var acc;
  for (size_t n = 0; n < zhat_c.size(); ++n) {
    Var sp = set_similarity(zhat_c[n], zc[n], layout, cfg.sinkhorn, cfg.detach_assignment);
    std::vector<Var> logits;
    if (!cfg.strict_paper_denominator)
      logits.push_back(reshape(mul_scalar(sp, inv_tau), {1, 1}));
    for (const Var& zn : negatives) {
      Var si = set_similarity(zhat_c[n], zn, layout, cfg.sinkhorn, cfg.detach_assignment);
      logits.push_back(reshape(mul_scalar(si, inv_tau), {1, 1}));
    }
    Var lse = lse_rows(transpose2d(concat_rows_n(logits)));  // (1)
    Var loss_n = sub(lse, mul_scalar(sp, inv_tau));
    acc = acc.valid() ? add(acc, loss_n) : loss_n;
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(zhat_c.size()));
  (void)g;
}

namespace {

double grad_norm_in_graph(Graph& g, const std::vector<Param*>& params) {
  double acc = 0.0;
  for (Param* p : params) {
    Var v = g.use(*p);  // cached; returns the existing leaf
    if (!g.has_grad(v)) continue;
    const Tensor& gr = g.grad(v);
    for (size_t i = 0; i < gr.numel(); ++i) acc += gr[i] * gr[i];
  }
  return std::sqrt(acc);
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << "total_loss: non-finite " << what << " (" << v << ")";
    throw std::runtime_error(os.str());
  }
}

}  // namespace

StepStats total_loss(const Tensor& x, nets::LatentEncoder& enc, nets::UNet& dec, nets::Denoiser* prior,
                     const nets::NoiseSchedule& sched, const TotalLossOptions& opt, Rng& rng) {
  opt.cfg.validate();
  opt.layout.validate();
  const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int K = opt.layout.K, D = opt.layout.D;
  if (B < 2) throw std::invalid_argument("total_loss: need batch >= 2 for rotation pairing");

  const bool use_prior = !opt.disable_prior && opt.cfg.lambda_prior > 0 && prior != nullptr;
  const bool use_con = !opt.disable_con && opt.cfg.lambda_con > 0;

  Graph g;
  StepStats stats;

  Var z_all;
  Var recon = recon_loss(g, x, enc, dec, sched, rng, opt.cfg, &z_all);
  stats.recon = recon.val()[0];
  check_finite(stats.recon, "reconstruction loss");

  Var aux;
  if (use_prior || use_con) {
    std::vector<Var> z(static_cast<size_t>(B));
    for (int n = 0; n < B; ++n) z[static_cast<size_t>(n)] = slice_rows(z_all, n * K, (n + 1) * K);
    std::vector<Var> zc(static_cast<size_t>(B));
    for (int n = 0; n < B; ++n) {
      const int partner = (n + 1) % B;
      auto plan = mixing::sample_plan(opt.strategy, opt.layout, rng);
      zc[static_cast<size_t>(n)] =
          mixing::apply_mix_graph(z[static_cast<size_t>(n)], z[static_cast<size_t>(partner)], plan);
    }
    Var cond = reshape(concat_rows_n(zc), {B, K, D});
    Var xc = nets::ddim_decode(g, dec, sched, cond, B, x.dim(1), H, W, opt.cfg.decode_steps, rng);

    if (use_prior) {
      Var surr = prior_loss_surrogate(g, xc, *prior, sched, rng, opt.cfg, &stats.prior_residual_norm);
      stats.prior_surrogate = surr.val()[0];
      check_finite(stats.prior_surrogate, "prior surrogate");
      aux = mul_scalar(surr, opt.cfg.lambda_prior);
    }
    if (use_con) {
      Var zhat_all = enc.forward(g, xc);
      std::vector<Var> zhat(static_cast<size_t>(B));
      for (int n = 0; n < B; ++n)
        zhat[static_cast<size_t>(n)] = slice_rows(zhat_all, n * K, (n + 1) * K);
      Var con = consistency_loss(zhat, zc, z, opt.layout, opt.cfg);
      stats.consistency = con.val()[0];
      check_finite(stats.consistency, "consistency loss");
      Var scaled = mul_scalar(con, opt.cfg.lambda_con);
      aux = aux.valid() ? add(aux, scaled) : scaled;
    }
  }

  stats.total = stats.recon + opt.cfg.lambda_prior * stats.prior_surrogate +
                opt.cfg.lambda_con * stats.consistency;
  check_finite(stats.total, "total loss");

  // pass 1: reconstruction -> encoder + decoder
  g.backward(recon);
  g.accumulate_param_grads(enc.trainable_params());
  g.accumulate_param_grads(dec.params());
  stats.enc_grad_norm = grad_norm_in_graph(g, enc.trainable_params());
  stats.dec_grad_norm = grad_norm_in_graph(g, dec.params());

  // pass 2: prior + consistency -> encoder only
  if (aux.valid()) {
    g.backward(aux);
    g.accumulate_param_grads(enc.trainable_params());
    const double aux_enc = grad_norm_in_graph(g, enc.trainable_params());
    stats.enc_grad_norm = std::sqrt(stats.enc_grad_norm * stats.enc_grad_norm + aux_enc * aux_enc);
  }
  return stats;
}

}  // namespace compdis::losses
