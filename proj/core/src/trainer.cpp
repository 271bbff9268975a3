#include "compdis/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "compdis/assignment.hpp"
#include "compdis/image_io.hpp"
#include "compdis/metrics.hpp"
#include "compdis/serialize.hpp"

namespace compdis::train {

using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  layout.validate();
  loss.validate();
  if (batch < 2) throw std::invalid_argument("RunConfig: batch must be >= 2");
  if (steps < 0 || prior_steps < 0) throw std::invalid_argument("RunConfig: negative step budget");
  if (lr <= 0) throw std::invalid_argument("RunConfig: lr must be positive");
  switch (strategy) {
    case mixing::Strategy::Attribute:
      if (layout.M != layout.K)
        throw std::invalid_argument("RunConfig: attribute strategy requires M == K");
      break;
    case mixing::Strategy::Object:
      if (layout.M != 0) throw std::invalid_argument("RunConfig: object strategy requires M == 0");
      break;
    case mixing::Strategy::Joint:
      if (layout.M <= 0 || layout.M >= layout.K)
        throw std::invalid_argument("RunConfig: joint strategy requires 0 < M < K");
      break;
  }
}

FactorLayout RunConfig::effective_mix_layout() const {
  if (!swap_strategy) return layout;
  FactorLayout l = layout;
  if (strategy == mixing::Strategy::Attribute) l.M = 0;       // mix as objects
  else if (strategy == mixing::Strategy::Object) l.M = l.K;   // mix as attributes
  else throw std::invalid_argument("swap_strategy is defined for attribute/object runs only");
  return l;
}

mixing::Strategy RunConfig::effective_strategy() const {
  if (!swap_strategy) return strategy;
  if (strategy == mixing::Strategy::Attribute) return mixing::Strategy::Object;
  if (strategy == mixing::Strategy::Object) return mixing::Strategy::Attribute;
  throw std::invalid_argument("swap_strategy is defined for attribute/object runs only");
}

std::string RunConfig::to_json() const {
  json j;
  j["dataset_dir"] = dataset_dir;
  j["layout"] = {{"K", layout.K}, {"M", layout.M}, {"D", layout.D}};
  j["strategy"] = mixing::to_string(strategy);
  j["lr"] = lr;
  j["batch"] = batch;
  j["steps"] = steps;
  j["prior_steps"] = prior_steps;
  j["aux_warmup_steps"] = aux_warmup_steps;
  j["checkpoint_every"] = checkpoint_every;
  j["seed"] = seed;
  j["loss"] = {{"lambda_prior", loss.lambda_prior},
               {"lambda_con", loss.lambda_con},
               {"tau", loss.tau},
               {"t_min_frac", loss.t_min_frac},
               {"t_max_frac", loss.t_max_frac},
               {"sinkhorn_epsilon", loss.sinkhorn.epsilon},
               {"sinkhorn_max_iters", loss.sinkhorn.max_iters},
               {"sinkhorn_tol", loss.sinkhorn.tol},
               {"detach_assignment", loss.detach_assignment},
               {"strict_paper_denominator", loss.strict_paper_denominator},
               {"recon_weight", loss.recon_weight == losses::LossConfig::ReconWeight::One ? "one" : "sigma2"},
               {"decode_steps", loss.decode_steps}};
  j["schedule"] = {{"T", schedule.T}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}};
  j["enc_base"] = enc_base;
  j["q_hidden"] = q_hidden;
  j["q_blocks"] = q_blocks;
  j["heads"] = heads;
  j["unet_base"] = unet_base;
  j["prior_base"] = prior_base;
  j["eval_decode_steps"] = eval_decode_steps;
  j["eval_pca_components"] = eval_pca_components;
  j["disable_prior"] = disable_prior;
  j["disable_con"] = disable_con;
  j["swap_strategy"] = swap_strategy;
  return j.dump();
}

RunConfig RunConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunConfig c;
  c.dataset_dir = j.value("dataset_dir", std::string());
  c.layout = {j.at("layout").at("K").get<int>(), j.at("layout").at("M").get<int>(),
              j.at("layout").at("D").get<int>()};
  c.strategy = mixing::strategy_from_string(j.at("strategy").get<std::string>());
  c.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<int>();
  c.steps = j.at("steps").get<int>();
  c.prior_steps = j.at("prior_steps").get<int>();
  c.aux_warmup_steps = j.value("aux_warmup_steps", 0);
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  const json& l = j.at("loss");
  c.loss.lambda_prior = l.at("lambda_prior").get<double>();
  c.loss.lambda_con = l.at("lambda_con").get<double>();
  c.loss.tau = l.at("tau").get<double>();
  c.loss.t_min_frac = l.at("t_min_frac").get<double>();
  c.loss.t_max_frac = l.at("t_max_frac").get<double>();
  c.loss.sinkhorn.epsilon = l.at("sinkhorn_epsilon").get<double>();
  c.loss.sinkhorn.max_iters = l.at("sinkhorn_max_iters").get<int>();
  c.loss.sinkhorn.tol = l.at("sinkhorn_tol").get<double>();
  c.loss.detach_assignment = l.at("detach_assignment").get<bool>();
  c.loss.strict_paper_denominator = l.at("strict_paper_denominator").get<bool>();
  c.loss.recon_weight = l.at("recon_weight").get<std::string>() == "sigma2"
                            ? losses::LossConfig::ReconWeight::Sigma2
                            : losses::LossConfig::ReconWeight::One;
  c.loss.decode_steps = l.at("decode_steps").get<int>();
  c.schedule.T = j.at("schedule").at("T").get<int>();
  c.schedule.beta_start = j.at("schedule").at("beta_start").get<double>();
  c.schedule.beta_end = j.at("schedule").at("beta_end").get<double>();
  c.enc_base = j.at("enc_base").get<int>();
  c.q_hidden = j.at("q_hidden").get<int>();
  c.q_blocks = j.at("q_blocks").get<int>();
  c.heads = j.at("heads").get<int>();
  c.unet_base = j.at("unet_base").get<int>();
  c.prior_base = j.at("prior_base").get<int>();
  c.eval_decode_steps = j.at("eval_decode_steps").get<int>();
  c.eval_pca_components = j.at("eval_pca_components").get<int>();
  c.disable_prior = j.at("disable_prior").get<bool>();
  c.disable_con = j.at("disable_con").get<bool>();
  c.swap_strategy = j.at("swap_strategy").get<bool>();
  return c;
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

Models Models::build(const RunConfig& cfg, bool with_prior) {
  cfg.validate();
  Models m{cfg, nets::NoiseSchedule(cfg.schedule), nullptr, nullptr, nullptr};
  Rng root(cfg.seed);
  Rng enc_rng = root.spawn(1), dec_rng = root.spawn(2), prior_rng = root.spawn(3);
  nets::EncoderConfig ec;
  ec.layout = cfg.layout;
  ec.mode = cfg.layout.M == cfg.layout.K ? nets::EncoderMode::Flat : nets::EncoderMode::Query;
  ec.base = cfg.enc_base;
  ec.q_hidden = cfg.q_hidden;
  ec.q_blocks = cfg.q_blocks;
  ec.heads = cfg.heads;
  m.enc = std::make_unique<nets::Encoder>(ec, enc_rng);
  nets::UNetConfig dc;
  dc.base = cfg.unet_base;
  dc.heads = cfg.heads;
  dc.cond_dim = cfg.layout.D;
  m.dec = std::make_unique<nets::UNet>(dc, dec_rng);
  if (with_prior) {
    nets::UNetConfig pc;
    pc.base = cfg.prior_base;
    pc.heads = cfg.heads;
    pc.cond_dim = 0;
    m.prior = std::make_unique<nets::UNet>(pc, prior_rng);
    m.prior->set_trainable(false);
  }
  return m;
}

namespace {

Tensor to_model_domain(const Tensor& img01) {
  Tensor out = img01;
  for (size_t i = 0; i < out.numel(); ++i) out[i] = 2.0 * out[i] - 1.0;
  return out;
}

Tensor batch_model_domain(const data::FactorDataset& ds, const std::vector<int>& idx) {
  const int S = ds.image_size;
  Tensor out({static_cast<int>(idx.size()), 3, S, S});
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor img = ds.image01(idx[b]);
    for (size_t i = 0; i < img.numel(); ++i)
      out[b * img.numel() + i] = 2.0 * img[i] - 1.0;
  }
  return out;
}

Tensor clamp01_from_model(const Tensor& xm) {
  Tensor out = xm;
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(0.5 * (out[i] + 1.0), 0.0, 1.0);
  return out;
}

}  // namespace

Tensor Models::encode01(const Tensor& img01) const {
  Graph g;
  Graph::NoGrad ng(g);
  const int S = cfg.layout.K;
  Var z = enc->forward(g, g.constant(to_model_domain(img01).reshaped({1, 3, img01.dim(1), img01.dim(2)})));
  return z.val().reshaped({S, cfg.layout.D});
}

Tensor Models::decode01(const Tensor& latents, uint64_t seed) const {
  return decode01_batch({latents}, seed)[0];
}

std::vector<Tensor> Models::decode01_batch(const std::vector<Tensor>& latents, uint64_t seed) const {
  Graph g;
  Graph::NoGrad ng(g);
  Rng rng(seed);
  const int K = cfg.layout.K, D = cfg.layout.D;
  const int B = static_cast<int>(latents.size());
  const int S = dec->config().image_size;
  Tensor cond({B, K, D});
  for (int b = 0; b < B; ++b) {
    const Tensor& z = latents[static_cast<size_t>(b)];
    if (z.rank() != 2 || z.dim(0) != K || z.dim(1) != D)
      throw std::invalid_argument("decode01: latents must be (K,D)");
    std::copy(z.data(), z.data() + z.numel(), cond.data() + static_cast<size_t>(b) * K * D);
  }
  Var img = nets::ddim_decode(g, *dec, sched, g.constant(cond), B, 3, S, S, cfg.eval_decode_steps, rng);
  std::vector<Tensor> out;
  const size_t stride = static_cast<size_t>(3) * S * S;
  for (int b = 0; b < B; ++b) {
    Tensor one({3, S, S});
    std::copy(img.val().data() + static_cast<size_t>(b) * stride,
              img.val().data() + static_cast<size_t>(b + 1) * stride, one.data());
    out.push_back(clamp01_from_model(one));
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

void dump_module(Archive& a, const std::string& prefix, Module& mod) {
  for (Param* p : mod.params()) {
    a.tensors.emplace_back(prefix + p->name, p->value);
    if (p->m.same_shape(p->value)) {
      a.tensors.emplace_back(prefix + p->name + ".adam_m", p->m);
      a.tensors.emplace_back(prefix + p->name + ".adam_v", p->v);
    }
  }
}

void restore_module(const Archive& a, const std::string& prefix, Module& mod) {
  for (Param* p : mod.params()) {
    const Tensor* t = a.find(prefix + p->name);
    if (!t) throw std::runtime_error("checkpoint missing tensor: " + prefix + p->name);
    if (!t->same_shape(p->value)) throw std::runtime_error("checkpoint shape mismatch: " + p->name);
    p->value = *t;
    if (const Tensor* m = a.find(prefix + p->name + ".adam_m")) {
      p->m = *m;
      p->v = *a.find(prefix + p->name + ".adam_v");
    }
  }
}

json rng_state_json(const Rng::State& st) {
  json j;
  j["s"] = {std::to_string(st.s[0]), std::to_string(st.s[1]), std::to_string(st.s[2]),
            std::to_string(st.s[3])};
  j["have_spare"] = st.have_spare;
  j["spare"] = st.spare;
  return j;
}

Rng::State rng_state_from_json(const json& j) {
  Rng::State st;
  for (int i = 0; i < 4; ++i) st.s[static_cast<size_t>(i)] = std::stoull(j.at("s")[static_cast<size_t>(i)].get<std::string>());
  st.have_spare = j.at("have_spare").get<bool>();
  st.spare = j.at("spare").get<double>();
  return st;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& type, const Models& m, int step,
                     const Adam& opt, const std::vector<std::pair<std::string, Rng::State>>& rngs) {
  Archive a;
  json j;
  j["type"] = type;
  j["config"] = json::parse(m.cfg.to_json());
  j["step"] = step;
  j["adam_steps"] = opt.steps_done();
  json jr = json::object();
  for (const auto& [name, st] : rngs) jr[name] = rng_state_json(st);
  j["rngs"] = jr;
  a.json_config = j.dump();
  if (type == "prior") {
    if (!m.prior) throw std::invalid_argument("save_checkpoint: no prior to save");
    dump_module(a, "prior/", *m.prior);
  } else {
    dump_module(a, "enc/", *m.enc);
    dump_module(a, "dec/", *m.dec);
    if (m.prior) dump_module(a, "prior/", *m.prior);
  }
  write_archive(path, a);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const Archive a = read_archive(path);
  const json j = json::parse(a.json_config);
  LoadedCheckpoint lc{j.at("type").get<std::string>(),
                      Models::build(RunConfig::from_json(j.at("config").dump()),
                                    /*with_prior=*/a.find("prior/unet.in.w") != nullptr),
                      j.at("step").get<int>(),
                      j.at("adam_steps").get<int64_t>(),
                      {}};
  if (lc.type == "prior") {
    restore_module(a, "prior/", *lc.models.prior);
  } else {
    restore_module(a, "enc/", *lc.models.enc);
    restore_module(a, "dec/", *lc.models.dec);
    if (lc.models.prior) restore_module(a, "prior/", *lc.models.prior);
  }
  for (const auto& [key, val] : j.at("rngs").items()) lc.rngs.emplace_back(key, rng_state_from_json(val));
  return lc;
}

// ---------------------------------------------------------------------------
// prior pretraining
// ---------------------------------------------------------------------------

namespace {

std::ofstream open_log(const std::string& path) {
  std::ofstream log;
  if (!path.empty()) {
    log.open(path, std::ios::app);
    if (!log) throw std::runtime_error("cannot open log: " + path);
  }
  return log;
}

std::vector<int> draw_batch(const std::vector<int>& pool, int batch, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(batch));
  for (auto& i : idx) i = pool[rng.uniform_u64(pool.size())];
  return idx;
}

}  // namespace

double pretrain_prior(const RunConfig& cfg, const data::FactorDataset& ds,
                      const std::string& out_ckpt, const std::string& log_path) {
  cfg.validate();
  Models m = Models::build(cfg, /*with_prior=*/true);
  m.prior->set_trainable(true);
  Adam opt({cfg.lr});
  Rng root(cfg.seed);
  root.spawn(1);
  root.spawn(2);
  root.spawn(3);  // keep weight streams aligned with Models::build
  Rng data_rng = root.spawn(11), noise_rng = root.spawn(12);
  auto pool = ds.indices(data::Split::Train);
  if (pool.empty()) throw std::invalid_argument("pretrain_prior: empty train split");
  auto log = open_log(log_path);
  double last = 0;
  for (int step = 1; step <= cfg.prior_steps; ++step) {
    const auto idx = draw_batch(pool, cfg.batch, data_rng);
    const Tensor x = batch_model_domain(ds, idx);
    std::vector<int> t(static_cast<size_t>(cfg.batch));
    for (auto& v : t) v = noise_rng.uniform_int(1, m.sched.T());
    const Tensor eps = Tensor::randn(x.shape(), noise_rng);
    const Tensor x_t = nets::add_noise(x, t, eps, m.sched);
    const Tensor target = nets::v_target(x, eps, t, m.sched);
    Graph g;
    Var pred = m.prior->apply(g, g.constant(x_t), t, Var{});
    Var loss = mse(pred, g.constant(target));
    last = loss.val()[0];
    if (!std::isfinite(last)) throw std::runtime_error("pretrain_prior: non-finite loss");
    opt.zero_grads(m.prior->params());
    g.backward(loss);
    g.accumulate_param_grads(m.prior->params());
    opt.step(m.prior->params());
    if (log && (step == 1 || step % 50 == 0 || step == cfg.prior_steps))
      log << json({{"step", step}, {"loss", last}}).dump() << "\n";
  }
  m.prior->set_trainable(false);
  save_checkpoint(out_ckpt, "prior", m, cfg.prior_steps, opt,
                  {{"data", data_rng.save()}, {"noise", noise_rng.save()}});
  return last;
}

// ---------------------------------------------------------------------------
// main training loop
// ---------------------------------------------------------------------------

TrainResult train(const RunConfig& cfg_in, const data::FactorDataset& ds,
                  const std::string& prior_ckpt, const std::string& out_ckpt,
                  const std::string& log_path, const std::string& resume_from, StepCallback cb) {
  RunConfig cfg = cfg_in;
  Models m{cfg, nets::NoiseSchedule(cfg.schedule), nullptr, nullptr, nullptr};
  Adam opt;
  Rng data_rng(0), step_rng(0);
  int start_step = 0;

  if (!resume_from.empty()) {
    LoadedCheckpoint lc = load_checkpoint(resume_from);
    if (lc.type != "main") throw std::invalid_argument("train: resume checkpoint is not a main run");
    cfg = lc.models.cfg;
    m = std::move(lc.models);
    opt.set_lr(cfg.lr);
    opt.set_steps_done(lc.adam_steps);
    start_step = lc.step;
    for (const auto& [name, st] : lc.rngs) {
      if (name == "data") data_rng.restore(st);
      if (name == "step") step_rng.restore(st);
    }
  } else {
    cfg.validate();
    opt.set_lr(cfg.lr);
    m = Models::build(cfg, /*with_prior=*/!cfg.disable_prior);
    if (!cfg.disable_prior) {
      if (prior_ckpt.empty())
        throw std::invalid_argument("train: prior checkpoint required unless disable_prior");
      const Archive pa = read_archive(prior_ckpt);
      const json pj = json::parse(pa.json_config);
      if (pj.at("type").get<std::string>() != "prior")
        throw std::invalid_argument("train: not a prior checkpoint: " + prior_ckpt);
      restore_module(pa, "prior/", *m.prior);
    }
    Rng root(cfg.seed);
    root.spawn(1);
    root.spawn(2);
    root.spawn(3);
    data_rng = root.spawn(21);
    step_rng = root.spawn(22);
  }
  if (m.prior) m.prior->set_trainable(false);

  auto pool = ds.indices(data::Split::Train);
  if (pool.empty()) throw std::invalid_argument("train: empty train split");
  auto log = open_log(log_path);

  std::vector<Param*> trainable = m.enc->params();
  for (Param* p : m.dec->params()) trainable.push_back(p);

  losses::TotalLossOptions opts;
  opts.strategy = cfg.effective_strategy();
  opts.layout = cfg.effective_mix_layout();
  opts.cfg = cfg.loss;
  opts.disable_prior = cfg.disable_prior;
  opts.disable_con = cfg.disable_con;

  TrainResult result;
  result.checkpoint_path = out_ckpt;
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = start_step + 1; step <= cfg.steps; ++step) {
    const auto idx = draw_batch(pool, cfg.batch, data_rng);
    const Tensor x = batch_model_domain(ds, idx);
    opt.zero_grads(trainable);
    losses::TotalLossOptions step_opts = opts;
    if (step <= cfg.aux_warmup_steps) {
      step_opts.disable_prior = true;
      step_opts.disable_con = true;
    }
    losses::StepStats stats;
    try {
      stats = losses::total_loss(x, *m.enc, *m.dec, m.prior.get(), m.sched, step_opts, step_rng);
    } catch (const std::runtime_error& e) {
      if (log) log << json({{"step", step}, {"abort", e.what()}}).dump() << "\n";
      throw;
    }
    opt.step(trainable);
    result.steps_done = step;
    result.last_recon = stats.recon;
    if (log) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << json({{"step", step},
                   {"recon", stats.recon},
                   {"prior_grad_norm", stats.prior_residual_norm},
                   {"consistency", stats.consistency},
                   {"total", stats.total},
                   {"elapsed_s", secs}})
                 .dump()
          << "\n";
    }
    if (cb) cb(step, stats);
    if (step % cfg.checkpoint_every == 0 || step == cfg.steps)
      save_checkpoint(out_ckpt, "main", m, step, opt,
                      {{"data", data_rng.save()}, {"step", step_rng.save()}});
  }
  if (cfg.steps == start_step)  // nothing to do, still emit a checkpoint
    save_checkpoint(out_ckpt, "main", m, start_step, opt,
                    {{"data", data_rng.save()}, {"step", step_rng.save()}});
  return result;
}

// ---------------------------------------------------------------------------
// evaluation suites
// ---------------------------------------------------------------------------

namespace {

struct EvalContext {
  LoadedCheckpoint lc;
  const data::FactorDataset& ds;
  uint64_t seed;
};

json eval_attr(EvalContext& ctx) {
  const auto& m = ctx.lc.models;
  if (ctx.ds.kind != data::DatasetKind::Attribute)
    throw std::invalid_argument("evaluate: attr suite requires an attribute dataset");
  const auto recipe = data::attr_recipe_from_json(ctx.ds.recipe_json);
  Rng rng(ctx.seed ^ 0xa77a);
  const int F = ctx.ds.factor_count();

  auto random_tuple = [&] {
    std::vector<int> t(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f)
      t[static_cast<size_t>(f)] = rng.uniform_int(0, ctx.ds.cardinalities[static_cast<size_t>(f)] - 1);
    return t;
  };

  // PCA fitted on an evaluation sample of latent sets
  std::vector<Tensor> sets;
  const int nfit = 512;
  for (int i = 0; i < nfit; ++i)
    sets.push_back(m.encode01(data::render_attr_image01(random_tuple(), recipe)));
  const auto pca = metrics::fit_pca(sets, m.cfg.eval_pca_components);
  metrics::RepFn rep = [&](const Tensor& img01) { return pca.project(m.encode01(img01)); };

  metrics::FactorVaeConfig fv_cfg;
  fv_cfg.votes = 600;
  fv_cfg.batch = 64;
  fv_cfg.seed = ctx.seed ^ 0xfedc;
  const double fv = metrics::factorvae_score(rep, ctx.ds, fv_cfg);

  const int d = m.cfg.layout.K * m.cfg.eval_pca_components;
  const int n_dci = std::max(2000, 12 * d);
  std::vector<double> lat;
  std::vector<int> fac;
  for (int i = 0; i < n_dci; ++i) {
    const auto t = random_tuple();
    const auto v = rep(data::render_attr_image01(t, recipe));
    lat.insert(lat.end(), v.begin(), v.end());
    fac.insert(fac.end(), t.begin(), t.end());
  }
  metrics::ProbeConfig pc;
  pc.seed = ctx.seed ^ 0xdc1;
  const auto R = metrics::importance_matrix(lat, n_dci, d, fac, ctx.ds.cardinalities, pc);
  const double dci = metrics::dci_disentanglement(R);

  return json{{"factorvae", fv}, {"dci", dci}};
}

struct MatchedObjects {
  std::vector<double> latents;  // n x D
  std::vector<int> shape, color;
  std::vector<double> position;  // n x 2 in [0,1]
  int n = 0;
};

MatchedObjects match_eval_objects(const EvalContext& ctx, const std::vector<int>& eval_idx,
                                  const std::vector<Tensor>& eval_latents) {
  const auto& m = ctx.lc.models;
  const int K = m.cfg.layout.K, D = m.cfg.layout.D, S = ctx.ds.image_size;
  const auto train_idx = ctx.ds.indices(data::Split::Train);
  std::vector<Tensor> refs;
  for (size_t i = 0; i < train_idx.size() && refs.size() < 8; ++i)
    refs.push_back(ctx.ds.image01(train_idx[i]));
  metrics::EncodeFn enc_fn = [&](const Tensor& img) { return m.encode01(img); };
  metrics::BatchDecodeFn dec_fn = [&](const std::vector<Tensor>& zs) {
    return m.decode01_batch(zs, 0x9e11);
  };

  MatchedObjects out;
  for (size_t e = 0; e < eval_idx.size(); ++e) {
    const int i = eval_idx[e];
    const auto& objs = ctx.ds.objects[static_cast<size_t>(i)];
    if (objs.empty()) continue;
    const auto match =
        metrics::match_latents_batched(eval_latents[e], ctx.ds.image01(i), refs, enc_fn, dec_fn);
    // IoU between matched slot regions and ground-truth masks
    const int n_obj = static_cast<int>(objs.size());
    const int Kp = std::max(K, n_obj);
    Tensor cost({Kp, Kp});
    cost.fill(1.0);
    for (int o = 0; o < n_obj; ++o) {
      const Tensor gt = ctx.ds.mask_frame(objs[static_cast<size_t>(o)].mask_index);
      for (int k = 0; k < K; ++k) {
        double inter = 0, uni = 0;
        for (size_t p = 0; p < gt.numel(); ++p) {
          const bool a = gt[p] > 0.5;
          const bool b = match.slot_of_pixel[p] == k;
          inter += (a && b) ? 1 : 0;
          uni += (a || b) ? 1 : 0;
        }
        cost[static_cast<size_t>(o) * Kp + k] = 1.0 - (uni > 0 ? inter / uni : 0.0);
      }
    }
    const auto assignment = assign::hungarian(cost);
    for (int o = 0; o < n_obj; ++o) {
      const int k = assignment.perm[static_cast<size_t>(o)];
      if (k >= K) continue;
      const Tensor& z = eval_latents[e];
      for (int dd = 0; dd < D; ++dd) out.latents.push_back(z[static_cast<size_t>(k) * D + dd]);
      out.shape.push_back(objs[static_cast<size_t>(o)].shape);
      out.color.push_back(objs[static_cast<size_t>(o)].color);
      out.position.push_back(static_cast<double>(objs[static_cast<size_t>(o)].cx) / S);
      out.position.push_back(static_cast<double>(objs[static_cast<size_t>(o)].cy) / S);
      ++out.n;
    }
  }
  return out;
}

json eval_probes(const EvalContext& ctx, const MatchedObjects& mo) {
  const int D = ctx.lc.models.cfg.layout.D;
  metrics::MlpProbeConfig mc;
  mc.seed = ctx.seed ^ 0x9b0be;
  json out;
  out["shape"] = metrics::probe_classify(mo.latents, mo.n, D, mo.shape, data::kNumShapes, mc);
  out["color"] = metrics::probe_classify(mo.latents, mo.n, D, mo.color, data::kNumPaletteColors, mc);
  out["position"] = metrics::probe_regress(mo.latents, mo.n, D, mo.position, 2, mc);
  return out;
}

json eval_obj(EvalContext& ctx, bool with_segmentation, int sbd_steps, int max_eval) {
  const auto& m = ctx.lc.models;
  if (ctx.ds.kind == data::DatasetKind::Attribute)
    throw std::invalid_argument("evaluate: obj suite requires an object dataset");
  auto eval_idx = ctx.ds.indices(data::Split::Val);
  for (int i : ctx.ds.indices(data::Split::Test)) eval_idx.push_back(i);
  if (static_cast<int>(eval_idx.size()) > max_eval) eval_idx.resize(static_cast<size_t>(max_eval));
  if (eval_idx.empty()) throw std::invalid_argument("evaluate: empty eval split");

  std::vector<Tensor> latents;
  for (int i : eval_idx) latents.push_back(m.encode01(ctx.ds.image01(i)));

  const auto mo = match_eval_objects(ctx, eval_idx, latents);
  json out;
  out["probes"] = eval_probes(ctx, mo);

  if (with_segmentation) {
    std::vector<Tensor> imgs;
    for (int i : eval_idx) imgs.push_back(ctx.ds.image01(i));
    metrics::SbdConfig sc;
    sc.steps = sbd_steps;
    sc.seed = ctx.seed ^ 0x5bd;
    sc.broadcast = ctx.ds.image_size / 4;
    const auto masks = metrics::sbd_masks(latents, imgs, sc);
    double ari = 0, iou = 0, bo = 0;
    const int S = ctx.ds.image_size;
    for (size_t e = 0; e < eval_idx.size(); ++e) {
      metrics::SegmentationEval ev;
      ev.h = S;
      ev.w = S;
      ev.pred.resize(static_cast<size_t>(S) * S);
      ev.gt.assign(static_cast<size_t>(S) * S, 0);
      ev.fg.assign(static_cast<size_t>(S) * S, 0);
      const auto& objs = ctx.ds.objects[static_cast<size_t>(eval_idx[e])];
      for (size_t o = 0; o < objs.size(); ++o) {
        const Tensor gt = ctx.ds.mask_frame(objs[o].mask_index);
        for (size_t p = 0; p < gt.numel(); ++p)
          if (gt[p] > 0.5) {
            ev.gt[p] = static_cast<int>(o) + 1;
            ev.fg[p] = 1;
          }
      }
      const Tensor& mk = masks[e];
      const int K = mk.dim(0);
      for (size_t p = 0; p < static_cast<size_t>(S) * S; ++p) {
        int arg = 0;
        for (int k = 1; k < K; ++k)
          if (mk[static_cast<size_t>(k) * S * S + p] > mk[static_cast<size_t>(arg) * S * S + p]) arg = k;
        ev.pred[p] = arg;
      }
      ari += metrics::fg_ari(ev);
      iou += metrics::miou(ev);
      bo += metrics::mbo(ev);
    }
    out["fg_ari"] = ari / static_cast<double>(eval_idx.size());
    out["miou"] = iou / static_cast<double>(eval_idx.size());
    out["mbo"] = bo / static_cast<double>(eval_idx.size());
  }
  return out;
}

json eval_joint(EvalContext& ctx, int style_pairs, int max_eval) {
  const auto& m = ctx.lc.models;
  if (ctx.ds.kind != data::DatasetKind::Style)
    throw std::invalid_argument("evaluate: joint suite requires a style dataset");
  if (m.cfg.layout.M < 1)
    throw std::invalid_argument("evaluate: joint suite requires an attribute slot (M >= 1)");
  metrics::StyleOracle oracle;
  oracle.fit(ctx.ds);
  metrics::GramExtractor gram;

  // held-out scenes, grouped by scene id
  auto held = ctx.ds.indices(data::Split::Val);
  for (int i : ctx.ds.indices(data::Split::Test)) held.push_back(i);
  std::map<int, std::vector<int>> by_scene;
  for (int i : held) by_scene[ctx.ds.scene_id[static_cast<size_t>(i)]].push_back(i);
  std::vector<std::pair<int, int>> pairs;  // (target image, source image), same scene
  Rng rng(ctx.seed ^ 0x10177);
  {
    std::vector<int> scenes;
    for (auto& [sc, imgs] : by_scene)
      if (imgs.size() >= 2) scenes.push_back(sc);
    if (scenes.empty()) throw std::invalid_argument("evaluate: no held-out scenes with style pairs");
    while (static_cast<int>(pairs.size()) < style_pairs) {
      const auto& imgs = by_scene[scenes[rng.uniform_u64(scenes.size())]];
      const int a = imgs[rng.uniform_u64(imgs.size())];
      int b = imgs[rng.uniform_u64(imgs.size())];
      if (ctx.ds.style[static_cast<size_t>(a)] == ctx.ds.style[static_cast<size_t>(b)]) continue;
      pairs.emplace_back(a, b);
    }
  }

  const int D = m.cfg.layout.D;
  int hits = 0;
  double gram_src = 0, gram_orig = 0;
  for (auto [a, b] : pairs) {
    Tensor za = m.encode01(ctx.ds.image01(a));
    const Tensor zb = m.encode01(ctx.ds.image01(b));
    for (int dd = 0; dd < D; ++dd) za[static_cast<size_t>(dd)] = zb[static_cast<size_t>(dd)];  // slot 0 = style
    const Tensor swapped = m.decode01(za, 0x51ed);
    if (oracle.predict(swapped) == ctx.ds.style[static_cast<size_t>(b)]) ++hits;
    gram_src += gram.loss(swapped, ctx.ds.image01(b));
    gram_orig += gram.loss(swapped, ctx.ds.image01(a));
  }

  json out;
  out["style_swap_accuracy"] = static_cast<double>(hits) / static_cast<double>(pairs.size());
  out["gram_to_source"] = gram_src / static_cast<double>(pairs.size());
  out["gram_to_original"] = gram_orig / static_cast<double>(pairs.size());

  // object probes over the non-style slots via the shared matching path
  auto eval_idx = held;
  if (static_cast<int>(eval_idx.size()) > max_eval) eval_idx.resize(static_cast<size_t>(max_eval));
  std::vector<Tensor> latents;
  for (int i : eval_idx) latents.push_back(m.encode01(ctx.ds.image01(i)));
  const auto mo = match_eval_objects(ctx, eval_idx, latents);
  out["probes"] = eval_probes(ctx, mo);
  out["style_oracle_accuracy"] = oracle.accuracy(ctx.ds, data::Split::Test);
  return out;
}

}  // namespace

std::string evaluate(const std::string& checkpoint_path, const data::FactorDataset& ds,
                     const std::string& suite, uint64_t seed, const std::string& figures_dir,
                     int pca_components_override) {
  EvalContext ctx{load_checkpoint(checkpoint_path), ds, seed};
  if (ctx.lc.type != "main") throw std::invalid_argument("evaluate: need a main checkpoint");
  if (pca_components_override > 0) ctx.lc.models.cfg.eval_pca_components = pca_components_override;
  json metrics_json;
  if (suite == "attr") metrics_json = eval_attr(ctx);
  else if (suite == "obj") metrics_json = eval_obj(ctx, true, 1200, 96);
  else if (suite == "obj-probes") metrics_json = eval_obj(ctx, false, 0, 96);
  else if (suite == "joint") metrics_json = eval_joint(ctx, 200, 96);
  else throw std::invalid_argument("evaluate: unknown suite " + suite);

  if (!figures_dir.empty()) {
    // a small reconstruction panel as a sanity figure
    std::vector<ImageU8> cells;
    const auto idx = ds.indices(data::Split::Test);
    for (size_t i = 0; i < idx.size() && i < 4; ++i) {
      const Tensor img = ds.image01(idx[i]);
      cells.push_back(to_u8(img));
      cells.push_back(to_u8(ctx.lc.models.decode01(ctx.lc.models.encode01(img), 0xf16)));
    }
    write_png(figures_dir + "/recon_panel.png", image_sheet(cells, static_cast<int>(cells.size() / 2), 2));
  }

  json report;
  report["suite"] = suite;
  report["checkpoint_step"] = ctx.lc.step;
  report["seed"] = seed;
  report["metrics"] = metrics_json;
  return report.dump(2);
}

void swap_grid(const std::string& checkpoint_path, const data::FactorDataset& ds, int target_index,
               const std::vector<int>& source_indices, int slot, const std::string& out_png) {
  const LoadedCheckpoint lc = load_checkpoint(checkpoint_path);
  if (lc.type != "main") throw std::invalid_argument("swap_grid: need a main checkpoint");
  const auto& m = lc.models;
  const int K = m.cfg.layout.K, D = m.cfg.layout.D;
  if (slot < -1 || slot >= K) throw std::invalid_argument("swap_grid: slot out of range");
  if (source_indices.size() < 1) throw std::invalid_argument("swap_grid: need at least one source");

  std::vector<int> slots;
  if (slot < 0)
    for (int k = 0; k < K; ++k) slots.push_back(k);
  else
    slots.push_back(slot);

  const Tensor target = ds.image01(target_index);
  const Tensor zt = m.encode01(target);
  std::vector<ImageU8> cells;
  cells.push_back(to_u8(target));
  const Tensor target_recon = m.decode01(zt, 0x6a1d);
  for (size_t c = 0; c < slots.size(); ++c) cells.push_back(to_u8(target_recon));
  for (int s : source_indices) {
    const Tensor src = ds.image01(s);
    const Tensor zs = m.encode01(src);
    cells.push_back(to_u8(src));
    for (int k : slots) {
      Tensor zmix = zs;
      std::copy(zt.data() + static_cast<size_t>(k) * D, zt.data() + static_cast<size_t>(k + 1) * D,
                zmix.data() + static_cast<size_t>(k) * D);
      cells.push_back(to_u8(m.decode01(zmix, 0x6a1d)));
    }
  }
  write_png(out_png, image_sheet(cells, static_cast<int>(source_indices.size()) + 1,
                                 static_cast<int>(slots.size()) + 1));
}

}  // namespace compdis::train
