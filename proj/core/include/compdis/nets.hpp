#pragma once

#include <string>
#include <vector>

#include "compdis/graph.hpp"
#include "compdis/layout.hpp"
#include "compdis/rng.hpp"
#include "compdis/sampler.hpp"

namespace compdis::nets {

Tensor sinusoidal_embedding(const std::vector<int>& t, int dim);

// ---------------------------------------------------------------------------
// Encoder: images -> K x D latent sets
// ---------------------------------------------------------------------------

// Anything that maps an (N,3,H,W) batch to (N*K, D) slot rows. The losses
// depend on this interface so small hand-built encoders can stand in for the
// conv nets in gradient checks.
struct LatentEncoder {
  virtual ~LatentEncoder() = default;
  virtual Var forward(Graph& g, Var x, bool trainable = true) = 0;
  virtual std::vector<Param*> trainable_params() = 0;
};

enum class EncoderMode {
  Flat,   // conv backbone + flat projection split into K slots (attribute runs)
  Query,  // K learnable queries refined by attention over spatial features
};

struct EncoderConfig {
  FactorLayout layout;
  EncoderMode mode = EncoderMode::Flat;
  int image_size = 32;
  int base = 32;      // backbone width
  int q_hidden = 64;  // query dim (Query mode)
  int q_blocks = 2;
  int heads = 4;
};

class Encoder : public Module, public LatentEncoder {
 public:
  Encoder(EncoderConfig cfg, Rng& rng);
  // x: (N,3,H,W) in model domain. Returns (N*K, D); rows n*K..n*K+K-1 are
  // sample n's slots.
  Var forward(Graph& g, Var x, bool trainable = true) override;
  std::vector<Param*> trainable_params() override { return params(); }
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  struct Conv {
    Param *w, *b;
  };
  struct Norm {
    Param *g, *b;
  };
  struct AttnP {
    Norm ln;
    Conv q, k, v, o;
  };
  struct QBlock {
    AttnP self_attn, cross_attn;
    Norm ln_mlp;
    Conv fc1, fc2;
  };
  // shared backbone
  Conv c1_, c2_, c3_;
  Norm n1_, n2_;
  // flat head
  Conv fc_h_, fc_out_;
  // query head
  Param* pos_emb_ = nullptr;
  Param* queries_ = nullptr;
  std::vector<QBlock> qblocks_;
  Norm q_final_ln_;
  Conv q_head_;
  bool trainable_flag_ = true;

  Var attn(Graph& g, Var q_tokens, Var kv_tokens, const AttnP& p, int heads);
  Var use(Graph& g, Param* p) { return g.use(*p, trainable_flag_); }
};

// ---------------------------------------------------------------------------
// U-shaped conv denoiser with v-prediction; optional cross-attention
// conditioning on a latent-set batch.
// ---------------------------------------------------------------------------

struct UNetConfig {
  int image_size = 32;
  int in_ch = 3;
  int patch = 2;  // space-to-depth factor applied at input/output
  int base = 32;
  int heads = 4;
  int groups = 8;
  int cond_dim = 0;  // latent D when conditional; 0 = unconditional
};

class UNet : public Module, public Denoiser {
 public:
  UNet(UNetConfig cfg, Rng& rng);
  Var apply(Graph& g, Var x_t, const std::vector<int>& t, Var cond) override;
  const UNetConfig& config() const { return cfg_; }
  void set_trainable(bool t) { trainable_flag_ = t; }
  bool trainable() const { return trainable_flag_; }
  bool frozen() const override { return !trainable_flag_; }

 private:
  UNetConfig cfg_;
  bool trainable_flag_ = true;
  struct Conv {
    Param *w, *b;
  };
  struct Norm {
    Param *g, *b;
  };
  struct ResBlock {
    Norm n1, n2;
    Conv c1, c2, emb, skip;  // skip.w == nullptr when channels match
  };
  struct AttnP {
    Norm n;
    Conv q, k, v, o;
  };
  Conv conv_in_;
  Conv temb1_, temb2_;
  ResBlock rb_d1_, rb_d2_, rb_m1_, rb_m2_, rb_u2_, rb_u1_;
  Conv down_, upc_;
  AttnP self_attn_, cross_attn_;
  Norm out_n_;
  Conv conv_out_;
  int emb_dim_ = 0;

  Var res_block(Graph& g, Var x, Var emb, const ResBlock& p);
  Var token_attn(Graph& g, Var x, Var kv_or_invalid, const AttnP& p);
  Var use(Graph& g, Param* p) { return g.use(*p, trainable_flag_); }
};

}  // namespace compdis::nets
