// Command-line front end: dataset generation, prior pretraining, training,
// evaluation, swap grids, and the discrete support checker.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "compdis/mixing.hpp"
#include "compdis/serialize.hpp"
#include "compdis/support_lab.hpp"
#include "compdis/synthdata.hpp"
#include "compdis/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace compdis;

namespace {

struct RunFlags {
  train::RunConfig cfg;
  std::string strategy = "auto";
  int K = 0, M = -1, D = 0;  // 0/-1 = derive from dataset kind
  std::string recon_weight = "one";
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--strategy", f.strategy, "attribute|object|joint|auto (default: by dataset kind)");
  cmd->add_option("-K,--slots", f.K, "latent slot count");
  cmd->add_option("-M,--attr-slots", f.M, "attribute slot count");
  cmd->add_option("-D,--slot-dim", f.D, "latent dimension per slot");
  cmd->add_option("--lr", f.cfg.lr, "learning rate");
  cmd->add_option("--batch", f.cfg.batch, "batch size");
  cmd->add_option("--steps", f.cfg.steps, "training steps");
  cmd->add_option("--prior-steps", f.cfg.prior_steps, "prior pretraining steps");
  cmd->add_option("--aux-warmup-steps", f.cfg.aux_warmup_steps,
                  "reconstruction-only steps before prior/consistency enable");
  cmd->add_option("--checkpoint-every", f.cfg.checkpoint_every, "checkpoint interval");
  cmd->add_option("--seed", f.cfg.seed, "run seed");
  cmd->add_option("--lambda-prior", f.cfg.loss.lambda_prior, "prior loss weight");
  cmd->add_option("--lambda-con", f.cfg.loss.lambda_con, "consistency loss weight");
  cmd->add_option("--tau", f.cfg.loss.tau, "InfoNCE temperature");
  cmd->add_option("--t-min-frac", f.cfg.loss.t_min_frac, "prior t lower bound fraction");
  cmd->add_option("--t-max-frac", f.cfg.loss.t_max_frac, "prior t upper bound fraction");
  cmd->add_option("--sinkhorn-epsilon", f.cfg.loss.sinkhorn.epsilon, "sinkhorn temperature");
  cmd->add_option("--sinkhorn-iters", f.cfg.loss.sinkhorn.max_iters, "sinkhorn max iterations");
  cmd->add_option("--sinkhorn-tol", f.cfg.loss.sinkhorn.tol, "sinkhorn tolerance");
  cmd->add_flag("--detach-assignment", f.cfg.loss.detach_assignment,
                "stop gradients through the soft assignment");
  cmd->add_flag("--strict-paper-denominator", f.cfg.loss.strict_paper_denominator,
                "InfoNCE denominator without the positive term");
  cmd->add_option("--recon-weight", f.recon_weight, "one|sigma2");
  cmd->add_option("--decode-steps", f.cfg.loss.decode_steps, "DDIM steps for composite decode (1-4)");
  cmd->add_option("--T", f.cfg.schedule.T, "diffusion timesteps");
  cmd->add_option("--beta-start", f.cfg.schedule.beta_start, "linear beta schedule start");
  cmd->add_option("--beta-end", f.cfg.schedule.beta_end, "linear beta schedule end");
  cmd->add_option("--enc-base", f.cfg.enc_base, "encoder base channels");
  cmd->add_option("--q-hidden", f.cfg.q_hidden, "query head hidden dim");
  cmd->add_option("--q-blocks", f.cfg.q_blocks, "query head blocks");
  cmd->add_option("--heads", f.cfg.heads, "attention heads");
  cmd->add_option("--unet-base", f.cfg.unet_base, "decoder base channels");
  cmd->add_option("--prior-base", f.cfg.prior_base, "prior base channels");
  cmd->add_option("--eval-decode-steps", f.cfg.eval_decode_steps, "DDIM steps for evaluation decode");
  cmd->add_option("--eval-pca-components", f.cfg.eval_pca_components, "PCA components per slot");
  cmd->add_flag("--disable-prior", f.cfg.disable_prior, "ablation: drop the prior loss");
  cmd->add_flag("--disable-con", f.cfg.disable_con, "ablation: drop the consistency loss");
  cmd->add_flag("--swap-strategy", f.cfg.swap_strategy, "ablation: apply the interchanged strategy");
}

train::RunConfig resolve_config(RunFlags& f, const data::FactorDataset& ds) {
  train::RunConfig cfg = f.cfg;
  cfg.loss.recon_weight = f.recon_weight == "sigma2" ? losses::LossConfig::ReconWeight::Sigma2
                                                     : losses::LossConfig::ReconWeight::One;
  std::string strat = f.strategy;
  if (strat == "auto") {
    switch (ds.kind) {
      case data::DatasetKind::Attribute: strat = "attribute"; break;
      case data::DatasetKind::Object: strat = "object"; break;
      case data::DatasetKind::Style: strat = "joint"; break;
    }
  }
  cfg.strategy = mixing::strategy_from_string(strat);
  // toy defaults per dataset kind when not set explicitly
  int K = f.K, M = f.M, D = f.D;
  if (K == 0) K = ds.kind == data::DatasetKind::Attribute ? 6 : 5;
  if (D == 0) D = ds.kind == data::DatasetKind::Attribute ? 8 : 16;
  if (M < 0) {
    if (cfg.strategy == mixing::Strategy::Attribute) M = K;
    else if (cfg.strategy == mixing::Strategy::Object) M = 0;
    else M = 1;
  }
  cfg.layout = {K, M, D};
  cfg.validate();
  return cfg;
}

int run_support_lab(int worlds, int max_k, int max_domain, uint64_t seed, bool object_closure,
                    const std::string& out) {
  Rng rng(seed);
  int agreements = 0;
  json counterexample = nullptr;
  for (int i = 0; i < worlds; ++i) {
    const auto world = support::random_world(max_k, max_domain, rng);
    const auto report = support::verify_equivalence(world);
    if (report.agree) {
      ++agreements;
    } else if (counterexample.is_null()) {
      json w;
      w["K"] = world.K;
      w["domains"] = world.domains;
      w["support"] = json::array();
      for (const auto& t : world.support) w["support"].push_back(t);
      w["closed"] = report.closed;
      w["factorized"] = report.factorized;
      counterexample = w;
    }
    if (object_closure) {
      // exploratory: report size of the unordered-exchange closure as well
      (void)support::pairwise_closure_object(world);
    }
  }
  json report;
  report["worlds"] = worlds;
  report["agreements"] = agreements;
  report["counterexample"] = counterexample;
  report["theorem_holds"] = agreements == worlds;
  const std::string text = report.dump(2);
  if (out.empty()) std::cout << text << std::endl;
  else write_file_atomic(out, text);
  return agreements == worlds ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compositional-bias disentanglement workbench"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file; command-line flags override");
  app.allow_config_extras(CLI::config_extras_mode::ignore_all);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_kind = "attr", gen_out = "data/toy";
  uint64_t gen_seed = 0;
  int gen_n = 0, corr_pairs = 0;
  double corr_sigma = 0.1;
  int obj_min = 2, obj_max = 4;
  gen->add_option("--kind", gen_kind, "attr|obj|style")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--n", gen_n, "images (attr: 0 = full grid) / scenes (obj, style)");
  gen->add_option("--min-objects", obj_min, "min sprites per scene");
  gen->add_option("--max-objects", obj_max, "max sprites per scene");
  gen->add_option("--correlate-pairs", corr_pairs, "correlate this many factor pairs (attr)");
  gen->add_option("--correlate-sigma", corr_sigma, "target pairwise correlation");

  // ---- support-lab ----
  auto* sup = app.add_subcommand("support-lab", "closure vs factorized-support equivalence checker");
  int sup_worlds = 200, sup_max_k = 4, sup_max_domain = 3;
  uint64_t sup_seed = 0;
  bool sup_obj = false;
  std::string sup_out;
  sup->add_option("--worlds", sup_worlds, "number of random worlds");
  sup->add_option("--max-k", sup_max_k, "max factor count");
  sup->add_option("--max-domain", sup_max_domain, "max per-factor domain size");
  sup->add_option("--seed", sup_seed, "world sampling seed");
  sup->add_flag("--object-closure", sup_obj, "also run the unordered-exchange closure");
  sup->add_option("--out", sup_out, "write the JSON report here instead of stdout");

  // ---- pretrain-prior ----
  auto* pre = app.add_subcommand("pretrain-prior", "train the unconditional denoiser, then freeze it");
  RunFlags pre_flags;
  std::string pre_data, pre_out = "prior.ckpt", pre_log;
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "checkpoint path");
  pre->add_option("--log", pre_log, "JSONL log path");
  add_run_flags(pre, pre_flags);

  // ---- train ----
  auto* tr = app.add_subcommand("train", "main training loop");
  RunFlags tr_flags;
  std::string tr_data, tr_prior, tr_out = "model.ckpt", tr_log, tr_resume;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--prior", tr_prior, "prior checkpoint (required unless --disable-prior)");
  tr->add_option("--out", tr_out, "checkpoint path");
  tr->add_option("--log", tr_log, "JSONL log path");
  tr->add_option("--resume", tr_resume, "resume from a main checkpoint");
  add_run_flags(tr, tr_flags);

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "run the metric suite for a checkpoint");
  std::string ev_ckpt, ev_data, ev_suite = "auto", ev_out, ev_figures;
  uint64_t ev_seed = 0;
  int ev_pca = 0;
  ev->add_option("--ckpt", ev_ckpt, "main checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--suite", ev_suite, "attr|obj|obj-probes|joint|auto");
  ev->add_option("--seed", ev_seed, "evaluation seed");
  ev->add_option("--pca-components", ev_pca, "override per-slot PCA components");
  ev->add_option("--out", ev_out, "report path (stdout when omitted)");
  ev->add_option("--figures", ev_figures, "directory for PNG panels");

  // ---- swap-grid ----
  auto* sw = app.add_subcommand("swap-grid", "emit a latent-swap image sheet");
  std::string sw_ckpt, sw_data, sw_out = "swap_grid.png";
  int sw_target = 0, sw_slot = -1, sw_sources = 6;
  sw->add_option("--ckpt", sw_ckpt, "main checkpoint")->required();
  sw->add_option("--data", sw_data, "dataset directory")->required();
  sw->add_option("--target", sw_target, "target image index");
  sw->add_option("--sources", sw_sources, "number of source images");
  sw->add_option("--slot", sw_slot, "single slot (default: all slots)");
  sw->add_option("--out", sw_out, "output PNG");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      data::FactorDataset ds;
      if (gen_kind == "attr") {
        data::AttrRecipe r;
        r.n = gen_n;
        r.seed = gen_seed;
        ds = data::gen_attr(r);
        if (corr_pairs > 0) ds = data::apply_correlation(ds, corr_pairs, corr_sigma);
      } else if (gen_kind == "obj") {
        data::ObjRecipe r;
        r.n = gen_n > 0 ? gen_n : 1000;
        r.seed = gen_seed;
        r.min_objects = obj_min;
        r.max_objects = obj_max;
        ds = data::gen_obj(r);
      } else if (gen_kind == "style") {
        data::StyleRecipe r;
        r.base.n = gen_n > 0 ? gen_n : 500;
        r.base.seed = gen_seed;
        r.base.min_objects = obj_min;
        r.base.max_objects = obj_max;
        ds = data::gen_style(r);
      } else {
        throw CLI::ValidationError("--kind must be attr|obj|style");
      }
      data::save_dataset(gen_out, ds);
      std::cout << "wrote " << ds.n << " images to " << gen_out << std::endl;
    } else if (*sup) {
      return run_support_lab(sup_worlds, sup_max_k, sup_max_domain, sup_seed, sup_obj, sup_out);
    } else if (*pre) {
      const auto ds = data::load_dataset(pre_data);
      auto cfg = resolve_config(pre_flags, ds);
      cfg.dataset_dir = pre_data;
      const double last = train::pretrain_prior(cfg, ds, pre_out, pre_log);
      std::cout << "prior trained, final loss " << last << ", checkpoint " << pre_out << std::endl;
    } else if (*tr) {
      const auto ds = data::load_dataset(tr_data);
      auto cfg = resolve_config(tr_flags, ds);
      cfg.dataset_dir = tr_data;
      const auto result = train::train(cfg, ds, tr_prior, tr_out, tr_log, tr_resume);
      std::cout << "trained " << result.steps_done << " steps, checkpoint " << result.checkpoint_path
                << std::endl;
    } else if (*ev) {
      const auto ds = data::load_dataset(ev_data);
      std::string suite = ev_suite;
      if (suite == "auto") suite = ds.kind == data::DatasetKind::Attribute ? "attr"
                                   : ds.kind == data::DatasetKind::Object  ? "obj"
                                                                           : "joint";
      if (!ev_figures.empty()) fs::create_directories(ev_figures);
      const std::string report = train::evaluate(ev_ckpt, ds, suite, ev_seed, ev_figures, ev_pca);
      if (ev_out.empty()) std::cout << report << std::endl;
      else write_file_atomic(ev_out, report);
    } else if (*sw) {
      const auto ds = data::load_dataset(sw_data);
      std::vector<int> sources;
      for (int i = 0; i < sw_sources; ++i) sources.push_back((sw_target + 1 + i) % ds.n);
      train::swap_grid(sw_ckpt, ds, sw_target, sources, sw_slot, sw_out);
      std::cout << "wrote " << sw_out << std::endl;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
