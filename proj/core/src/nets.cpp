#include "compdis/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace compdis::nets {

Tensor sinusoidal_embedding(const std::vector<int>& t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
  const int half = dim / 2;
  Tensor out({static_cast<int>(t.size()), dim});
  for (size_t n = 0; n < t.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
      out[n * dim + i] = std::sin(t[n] * freq);
      out[n * dim + half + i] = std::cos(t[n] * freq);
    }
  return out;
}

namespace {

Tensor conv_init(int co, int ci, int k, Rng& rng) {
  const double std = std::sqrt(1.0 / (ci * k * k));
  return Tensor::randn({co, ci, k, k}, rng, std);
}

Tensor linear_init(int cin, int cout, Rng& rng) {
  const double std = std::sqrt(1.0 / cin);
  return Tensor::randn({cin, cout}, rng, std);
}

int norm_groups(int channels, int preferred) {
  int g = std::min(preferred, channels);
  while (channels % g != 0) --g;
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(EncoderConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.layout.validate();
  const int B = cfg_.base;
  c1_ = {&add_param("enc.c1.w", conv_init(B, 3, 3, rng)), &add_param("enc.c1.b", Tensor({B}))};
  n1_ = {&add_param("enc.n1.g", Tensor::full({B}, 1.0)), &add_param("enc.n1.b", Tensor({B}))};
  c2_ = {&add_param("enc.c2.w", conv_init(2 * B, B, 3, rng)), &add_param("enc.c2.b", Tensor({2 * B}))};
  n2_ = {&add_param("enc.n2.g", Tensor::full({2 * B}, 1.0)), &add_param("enc.n2.b", Tensor({2 * B}))};

  const int K = cfg_.layout.K, D = cfg_.layout.D;
  if (cfg_.mode == EncoderMode::Flat) {
    c3_ = {&add_param("enc.c3.w", conv_init(2 * B, 2 * B, 3, rng)),
           &add_param("enc.c3.b", Tensor({2 * B}))};
    const int spatial = cfg_.image_size / 8;  // three stride-2 convs
    const int flat = 2 * B * spatial * spatial;
    const int hidden = 256;
    fc_h_ = {&add_param("enc.fc_h.w", linear_init(flat, hidden, rng)),
             &add_param("enc.fc_h.b", Tensor({hidden}))};
    fc_out_ = {&add_param("enc.fc_out.w", linear_init(hidden, K * D, rng)),
               &add_param("enc.fc_out.b", Tensor({K * D}))};
  } else {
    const int Q = cfg_.q_hidden;
    if (Q % cfg_.heads != 0) throw std::invalid_argument("Encoder: q_hidden must divide by heads");
    c3_ = {&add_param("enc.c3.w", conv_init(Q, 2 * B, 3, rng)), &add_param("enc.c3.b", Tensor({Q}))};
    const int tokens = (cfg_.image_size / 4) * (cfg_.image_size / 4);
    pos_emb_ = &add_param("enc.pos", Tensor::randn({tokens, Q}, rng, 0.02));
    queries_ = &add_param("enc.queries", Tensor::randn({K, Q}, rng, 0.02));
    qblocks_.resize(static_cast<size_t>(cfg_.q_blocks));
    for (int bI = 0; bI < cfg_.q_blocks; ++bI) {
      auto& blk = qblocks_[static_cast<size_t>(bI)];
      const std::string pre = "enc.blk" + std::to_string(bI) + ".";
      auto mk_attn = [&](const std::string& nm, int kv_dim) {
        AttnP a;
        a.ln = {&add_param(pre + nm + ".ln.g", Tensor::full({Q}, 1.0)),
                &add_param(pre + nm + ".ln.b", Tensor({Q}))};
        a.q = {&add_param(pre + nm + ".q.w", linear_init(Q, Q, rng)),
               &add_param(pre + nm + ".q.b", Tensor({Q}))};
        a.k = {&add_param(pre + nm + ".k.w", linear_init(kv_dim, Q, rng)),
               &add_param(pre + nm + ".k.b", Tensor({Q}))};
        a.v = {&add_param(pre + nm + ".v.w", linear_init(kv_dim, Q, rng)),
               &add_param(pre + nm + ".v.b", Tensor({Q}))};
        a.o = {&add_param(pre + nm + ".o.w", Tensor({Q, Q})), &add_param(pre + nm + ".o.b", Tensor({Q}))};
        return a;
      };
      blk.self_attn = mk_attn("self", Q);
      blk.cross_attn = mk_attn("cross", Q);
      blk.ln_mlp = {&add_param(pre + "mlp.ln.g", Tensor::full({Q}, 1.0)),
                    &add_param(pre + "mlp.ln.b", Tensor({Q}))};
      blk.fc1 = {&add_param(pre + "mlp.fc1.w", linear_init(Q, 4 * Q, rng)),
                 &add_param(pre + "mlp.fc1.b", Tensor({4 * Q}))};
      blk.fc2 = {&add_param(pre + "mlp.fc2.w", Tensor({4 * Q, Q})),
                 &add_param(pre + "mlp.fc2.b", Tensor({Q}))};
    }
    q_final_ln_ = {&add_param("enc.final.ln.g", Tensor::full({Q}, 1.0)),
                   &add_param("enc.final.ln.b", Tensor({Q}))};
    q_head_ = {&add_param("enc.head.w", linear_init(Q, D, rng)), &add_param("enc.head.b", Tensor({D}))};
  }
}

Var Encoder::attn(Graph& g, Var q_tokens, Var kv_tokens, const AttnP& p, int heads) {
  const int N = q_tokens.val().dim(0), Tq = q_tokens.val().dim(1), C = q_tokens.val().dim(2);
  const int Tk = kv_tokens.val().dim(1), Ckv = kv_tokens.val().dim(2);
  Var qn = layer_norm_last(q_tokens, use(g, p.ln.g), use(g, p.ln.b));
  Var q2 = linear(reshape(qn, {N * Tq, C}), use(g, p.q.w), use(g, p.q.b));
  Var kv2 = reshape(kv_tokens, {N * Tk, Ckv});
  Var k2 = linear(kv2, use(g, p.k.w), use(g, p.k.b));
  Var v2 = linear(kv2, use(g, p.v.w), use(g, p.v.b));
  Var qh = heads_split(reshape(q2, {N, Tq, C}), heads);
  Var kh = heads_split(reshape(k2, {N, Tk, C}), heads);
  Var vh = heads_split(reshape(v2, {N, Tk, C}), heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(C / heads));
  Var att = softmax_last(mul_scalar(bmm_nt(qh, kh), scale));
  Var outh = heads_merge(bmm(att, vh), heads);
  Var out = linear(reshape(outh, {N * Tq, C}), use(g, p.o.w), use(g, p.o.b));
  return add(q_tokens, reshape(out, {N, Tq, C}));
}

Var Encoder::forward(Graph& g, Var x, bool trainable) {
  trainable_flag_ = trainable;
  const Tensor& X = x.val();
  if (X.rank() != 4 || X.dim(1) != 3 || X.dim(2) != cfg_.image_size || X.dim(3) != cfg_.image_size)
    throw std::invalid_argument("Encoder: input resolution mismatch");
  const int N = X.dim(0);
  const int K = cfg_.layout.K, D = cfg_.layout.D;

  Var h = conv2d(x, use(g, c1_.w), use(g, c1_.b), 2, 1);
  h = silu(group_norm(h, use(g, n1_.g), use(g, n1_.b), norm_groups(cfg_.base, 8)));
  h = conv2d(h, use(g, c2_.w), use(g, c2_.b), 2, 1);
  h = silu(group_norm(h, use(g, n2_.g), use(g, n2_.b), norm_groups(2 * cfg_.base, 8)));

  if (cfg_.mode == EncoderMode::Flat) {
    h = silu(conv2d(h, use(g, c3_.w), use(g, c3_.b), 2, 1));
    const int flat = static_cast<int>(h.val().numel()) / N;
    Var f = reshape(h, {N, flat});
    f = silu(linear(f, use(g, fc_h_.w), use(g, fc_h_.b)));
    Var out = linear(f, use(g, fc_out_.w), use(g, fc_out_.b));
    return reshape(out, {N * K, D});
  }

  const int Q = cfg_.q_hidden;
  h = conv2d(h, use(g, c3_.w), use(g, c3_.b), 1, 1);
  Var tokens = nchw_to_ntc(h);  // (N, T, Q)
  const int T = tokens.val().dim(1);
  Var pos = reshape(use(g, pos_emb_), {1 * T, Q});
  // add positional embedding to every sample
  Var tokens2d = reshape(tokens, {N * T, Q});
  std::vector<Var> with_pos;
  for (int n = 0; n < N; ++n) with_pos.push_back(add(slice_rows(tokens2d, n * T, (n + 1) * T), pos));
  tokens = reshape(concat_rows_n(with_pos), {N, T, Q});

  std::vector<Var> qreps(static_cast<size_t>(N), use(g, queries_));
  Var q = reshape(concat_rows_n(qreps), {N, K, Q});
  for (auto& blk : qblocks_) {
    q = attn(g, q, layer_norm_last(q, use(g, blk.self_attn.ln.g), use(g, blk.self_attn.ln.b)),
             blk.self_attn, cfg_.heads);
    q = attn(g, q, tokens, blk.cross_attn, cfg_.heads);
    Var m = layer_norm_last(q, use(g, blk.ln_mlp.g), use(g, blk.ln_mlp.b));
    Var m2 = reshape(m, {N * K, Q});
    m2 = linear(silu(linear(m2, use(g, blk.fc1.w), use(g, blk.fc1.b))), use(g, blk.fc2.w),
                use(g, blk.fc2.b));
    q = add(q, reshape(m2, {N, K, Q}));
  }
  Var qf = layer_norm_last(q, use(g, q_final_ln_.g), use(g, q_final_ln_.b));
  return linear(reshape(qf, {N * K, Q}), use(g, q_head_.w), use(g, q_head_.b));
}

// ---------------------------------------------------------------------------
// UNet
// ---------------------------------------------------------------------------

UNet::UNet(UNetConfig cfg, Rng& rng) : cfg_(cfg) {
  const int C = cfg_.base;
  const int p2 = cfg_.patch * cfg_.patch;
  const int in_eff = cfg_.in_ch * p2;
  emb_dim_ = 2 * C;

  auto mk_conv = [&](const std::string& nm, int co, int ci, int k, bool zero) {
    Conv c;
    c.w = &add_param(nm + ".w", zero ? Tensor({co, ci, k, k}) : conv_init(co, ci, k, rng));
    c.b = &add_param(nm + ".b", Tensor({co}));
    return c;
  };
  auto mk_norm = [&](const std::string& nm, int c) {
    Norm n;
    n.g = &add_param(nm + ".g", Tensor::full({c}, 1.0));
    n.b = &add_param(nm + ".b", Tensor({c}));
    return n;
  };
  auto mk_res = [&](const std::string& nm, int ci, int co) {
    ResBlock r;
    r.n1 = mk_norm(nm + ".n1", ci);
    r.c1 = mk_conv(nm + ".c1", co, ci, 3, false);
    r.emb = {&add_param(nm + ".emb.w", linear_init(emb_dim_, co, rng)),
             &add_param(nm + ".emb.b", Tensor({co}))};
    r.n2 = mk_norm(nm + ".n2", co);
    r.c2 = mk_conv(nm + ".c2", co, co, 3, true);  // zero-init
    if (ci != co) r.skip = mk_conv(nm + ".skip", co, ci, 1, false);
    else r.skip = {nullptr, nullptr};
    return r;
  };
  auto mk_attn = [&](const std::string& nm, int c, int kv_dim) {
    AttnP a;
    a.n = mk_norm(nm + ".n", c);
    a.q = {&add_param(nm + ".q.w", linear_init(c, c, rng)), &add_param(nm + ".q.b", Tensor({c}))};
    a.k = {&add_param(nm + ".k.w", linear_init(kv_dim, c, rng)), &add_param(nm + ".k.b", Tensor({c}))};
    a.v = {&add_param(nm + ".v.w", linear_init(kv_dim, c, rng)), &add_param(nm + ".v.b", Tensor({c}))};
    a.o = {&add_param(nm + ".o.w", Tensor({c, c})), &add_param(nm + ".o.b", Tensor({c}))};
    return a;
  };

  conv_in_ = mk_conv("unet.in", C, in_eff, 3, false);
  temb1_ = {&add_param("unet.temb1.w", linear_init(C, emb_dim_, rng)),
            &add_param("unet.temb1.b", Tensor({emb_dim_}))};
  temb2_ = {&add_param("unet.temb2.w", linear_init(emb_dim_, emb_dim_, rng)),
            &add_param("unet.temb2.b", Tensor({emb_dim_}))};
  rb_d1_ = mk_res("unet.d1", C, C);
  down_ = mk_conv("unet.down", 2 * C, C, 3, false);
  rb_d2_ = mk_res("unet.d2", 2 * C, 2 * C);
  rb_m1_ = mk_res("unet.m1", 2 * C, 2 * C);
  self_attn_ = mk_attn("unet.sa", 2 * C, 2 * C);
  if (cfg_.cond_dim > 0) cross_attn_ = mk_attn("unet.ca", 2 * C, cfg_.cond_dim);
  rb_m2_ = mk_res("unet.m2", 2 * C, 2 * C);
  rb_u2_ = mk_res("unet.u2", 4 * C, 2 * C);
  upc_ = mk_conv("unet.upc", C, 2 * C, 3, false);
  rb_u1_ = mk_res("unet.u1", 2 * C, C);
  out_n_ = mk_norm("unet.outn", C);
  conv_out_ = mk_conv("unet.out", in_eff, C, 3, true);  // zero-init
}

Var UNet::res_block(Graph& g, Var x, Var emb_act, const ResBlock& p) {
  const int groups = norm_groups(x.val().dim(1), cfg_.groups);
  Var h = silu(group_norm(x, use(g, p.n1.g), use(g, p.n1.b), groups));
  h = conv2d(h, use(g, p.c1.w), use(g, p.c1.b), 1, 1);
  Var e = linear(emb_act, use(g, p.emb.w), use(g, p.emb.b));
  h = add_per_sample_ch(h, e);
  const int groups2 = norm_groups(h.val().dim(1), cfg_.groups);
  h = silu(group_norm(h, use(g, p.n2.g), use(g, p.n2.b), groups2));
  h = conv2d(h, use(g, p.c2.w), use(g, p.c2.b), 1, 1);
  Var s = p.skip.w ? conv2d(x, use(g, p.skip.w), use(g, p.skip.b), 1, 0) : x;
  return add(h, s);
}

Var UNet::token_attn(Graph& g, Var x, Var kv_or_invalid, const AttnP& p) {
  const int N = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
  const int groups = norm_groups(C, cfg_.groups);
  Var tok = nchw_to_ntc(group_norm(x, use(g, p.n.g), use(g, p.n.b), groups));  // (N,T,C)
  const int T = H * W;
  Var q2 = linear(reshape(tok, {N * T, C}), use(g, p.q.w), use(g, p.q.b));
  Var kv = kv_or_invalid.valid() ? kv_or_invalid : tok;
  const int Tk = kv.val().dim(1), Ckv = kv.val().dim(2);
  Var kv2 = reshape(kv, {N * Tk, Ckv});
  Var k2 = linear(kv2, use(g, p.k.w), use(g, p.k.b));
  Var v2 = linear(kv2, use(g, p.v.w), use(g, p.v.b));
  const int heads = cfg_.heads;
  Var qh = heads_split(reshape(q2, {N, T, C}), heads);
  Var kh = heads_split(reshape(k2, {N, Tk, C}), heads);
  Var vh = heads_split(reshape(v2, {N, Tk, C}), heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(C / heads));
  Var att = softmax_last(mul_scalar(bmm_nt(qh, kh), scale));
  Var outh = heads_merge(bmm(att, vh), heads);
  Var out = linear(reshape(outh, {N * T, C}), use(g, p.o.w), use(g, p.o.b));
  return add(x, ntc_to_nchw(reshape(out, {N, T, C}), H, W));
}

Var UNet::apply(Graph& g, Var x_t, const std::vector<int>& t, Var cond) {
  const Tensor& X = x_t.val();
  if (X.rank() != 4 || X.dim(1) != cfg_.in_ch || X.dim(2) != cfg_.image_size ||
      X.dim(3) != cfg_.image_size)
    throw std::invalid_argument("UNet: input shape mismatch");
  if (static_cast<size_t>(X.dim(0)) != t.size())
    throw std::invalid_argument("UNet: batch/timestep mismatch");
  if (cfg_.cond_dim > 0) {
    if (!cond.valid() || cond.val().rank() != 3 || cond.val().dim(0) != X.dim(0) ||
        cond.val().dim(2) != cfg_.cond_dim)
      throw std::invalid_argument("UNet: conditioning latents missing or mis-shaped");
  } else if (cond.valid()) {
    throw std::invalid_argument("UNet: unexpected conditioning for unconditional model");
  }

  Var e = g.constant(sinusoidal_embedding(t, cfg_.base));
  e = linear(e, use(g, temb1_.w), use(g, temb1_.b));
  e = linear(silu(e), use(g, temb2_.w), use(g, temb2_.b));
  Var es = silu(e);

  Var h = space_to_depth(x_t, cfg_.patch);
  h = conv2d(h, use(g, conv_in_.w), use(g, conv_in_.b), 1, 1);
  Var d1 = res_block(g, h, es, rb_d1_);
  Var h2 = conv2d(d1, use(g, down_.w), use(g, down_.b), 2, 1);
  Var d2 = res_block(g, h2, es, rb_d2_);
  Var m = res_block(g, d2, es, rb_m1_);
  m = token_attn(g, m, Var{}, self_attn_);
  if (cfg_.cond_dim > 0) m = token_attn(g, m, cond, cross_attn_);
  m = res_block(g, m, es, rb_m2_);
  Var u2 = res_block(g, concat_ch(m, d2), es, rb_u2_);
  Var u = conv2d(upsample2x(u2), use(g, upc_.w), use(g, upc_.b), 1, 1);
  Var u1 = res_block(g, concat_ch(u, d1), es, rb_u1_);
  const int groups = norm_groups(u1.val().dim(1), cfg_.groups);
  Var out = silu(group_norm(u1, use(g, out_n_.g), use(g, out_n_.b), groups));
  out = conv2d(out, use(g, conv_out_.w), use(g, conv_out_.b), 1, 1);
  return depth_to_space(out, cfg_.patch);
}

}  // namespace compdis::nets
