#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "compdis/layout.hpp"
#include "compdis/losses.hpp"
#include "compdis/mixing.hpp"
#include "compdis/nets.hpp"
#include "compdis/synthdata.hpp"

namespace compdis::train {

struct RunConfig {
  std::string dataset_dir;
  FactorLayout layout{6, 6, 8};
  mixing::Strategy strategy = mixing::Strategy::Attribute;

  double lr = 1e-4;
  int batch = 64;
  int steps = 20000;
  int prior_steps = 20000;
  // reconstruction-only warmup before the prior/consistency terms switch on;
  // composites only inform the consistency game once the decoder is usable
  int aux_warmup_steps = 0;
  int checkpoint_every = 1000;
  uint64_t seed = 0;

  losses::LossConfig loss;
  nets::ScheduleConfig schedule;

  int enc_base = 32;
  int q_hidden = 64;
  int q_blocks = 2;
  int heads = 4;
  int unet_base = 64;
  int prior_base = 64;
  int eval_decode_steps = 4;
  int eval_pca_components = 1;

  bool disable_prior = false;
  bool disable_con = false;
  bool swap_strategy = false;

  void validate() const;
  // Mixing/similarity see the swapped block structure under swap_strategy;
  // the encoder and evaluation are untouched by the ablation.
  FactorLayout effective_mix_layout() const;
  mixing::Strategy effective_strategy() const;

  std::string to_json() const;
  static RunConfig from_json(const std::string& json);
};

// Bundle of the three networks plus the schedule, rebuilt from a config.
struct Models {
  RunConfig cfg;
  nets::NoiseSchedule sched;
  std::unique_ptr<nets::Encoder> enc;
  std::unique_ptr<nets::UNet> dec;
  std::unique_ptr<nets::UNet> prior;  // may be null (disable_prior)

  static Models build(const RunConfig& cfg, bool with_prior);

  // no-grad conveniences on [0,1] images
  Tensor encode01(const Tensor& img01) const;             // (3,H,W) -> (K,D)
  Tensor decode01(const Tensor& latents, uint64_t seed) const;  // (K,D) -> (3,H,W)
  std::vector<Tensor> decode01_batch(const std::vector<Tensor>& latents, uint64_t seed) const;
};

// Checkpoints are self-describing: full config JSON, step counters, optimizer
// moments, and RNG streams ride along with the weights.
void save_checkpoint(const std::string& path, const std::string& type, const Models& m, int step,
                     const Adam& opt, const std::vector<std::pair<std::string, Rng::State>>& rngs);

struct LoadedCheckpoint {
  std::string type;  // "prior" or "main"
  Models models;
  int step = 0;
  int64_t adam_steps = 0;
  std::vector<std::pair<std::string, Rng::State>> rngs;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

using StepCallback = std::function<void(int step, const losses::StepStats&)>;

// Unconditional denoiser pretraining on the train split; returns final loss.
double pretrain_prior(const RunConfig& cfg, const data::FactorDataset& ds,
                      const std::string& out_ckpt, const std::string& log_path = "");

struct TrainResult {
  int steps_done = 0;
  double last_recon = 0;
  std::string checkpoint_path;
};

TrainResult train(const RunConfig& cfg, const data::FactorDataset& ds,
                  const std::string& prior_ckpt, const std::string& out_ckpt,
                  const std::string& log_path = "", const std::string& resume_from = "",
                  StepCallback cb = nullptr);

// Metric suite keyed by dataset kind; returns the JSON report text.
// pca_components_override > 0 replaces the checkpoint's per-slot PCA width.
std::string evaluate(const std::string& checkpoint_path, const data::FactorDataset& ds,
                     const std::string& suite, uint64_t seed, const std::string& figures_dir = "",
                     int pca_components_override = 0);

// Latent swap sheet: rows = sources (+header), columns = slots (+header).
// slot = -1 emits all K columns; a specific slot emits a single column.
void swap_grid(const std::string& checkpoint_path, const data::FactorDataset& ds, int target_index,
               const std::vector<int>& source_indices, int slot, const std::string& out_png);

}  // namespace compdis::train
