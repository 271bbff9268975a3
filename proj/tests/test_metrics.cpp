#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <memory>

#include "compdis/metrics.hpp"
#include "compdis/rng.hpp"

using namespace compdis;
using namespace compdis::metrics;

namespace {

// brute-force pair-counting ARI over foreground pixels
double ari_oracle(const SegmentationEval& ev) {
  std::vector<size_t> fg;
  for (size_t i = 0; i < ev.fg.size(); ++i)
    if (ev.fg[i]) fg.push_back(i);
  double both = 0, same_gt = 0, same_pred = 0;
  const double pairs = static_cast<double>(fg.size()) * (fg.size() - 1) / 2.0;
  for (size_t a = 0; a < fg.size(); ++a)
    for (size_t b = a + 1; b < fg.size(); ++b) {
      const bool g = ev.gt[fg[a]] == ev.gt[fg[b]];
      const bool p = ev.pred[fg[a]] == ev.pred[fg[b]];
      same_gt += g;
      same_pred += p;
      both += g && p;
    }
  const double expected = same_gt * same_pred / pairs;
  const double denom = 0.5 * (same_gt + same_pred) - expected;
  if (std::fabs(denom) < 1e-12) return 1.0;
  return (both - expected) / denom;
}

SegmentationEval make_eval(std::vector<int> gt, std::vector<int> pred, int h, int w) {
  SegmentationEval ev;
  ev.h = h;
  ev.w = w;
  ev.gt = std::move(gt);
  ev.pred = std::move(pred);
  ev.fg.assign(static_cast<size_t>(h) * w, 1);
  return ev;
}

}  // namespace

TEST_CASE("fg_ari: identities, the -0.5 four-pixel case, and the pair-counting oracle") {
  auto ev = make_eval({1, 1, 2, 2}, {1, 1, 2, 2}, 2, 2);
  CHECK(fg_ari(ev) == doctest::Approx(1.0));
  auto cross = make_eval({1, 1, 2, 2}, {1, 2, 1, 2}, 2, 2);
  CHECK(fg_ari(cross) == doctest::Approx(-0.5));

  Rng rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 12;
    std::vector<int> gt(n), pred(n);
    for (auto& v : gt) v = rng.uniform_int(1, 3);
    for (auto& v : pred) v = rng.uniform_int(1, 3);
    auto e = make_eval(gt, pred, 3, 4);
    // foreground restriction exercised too
    for (int i = 0; i < 4; ++i) e.fg[static_cast<size_t>(rng.uniform_u64(n))] = 0;
    bool any = false;
    for (auto b : e.fg) any = any || b;
    if (!any) continue;
    CHECK(fg_ari(e) == doctest::Approx(ari_oracle(e)).epsilon(1e-12));
  }
  // permutation invariance in predicted ids
  auto a = make_eval({1, 1, 2, 2, 3, 3}, {2, 2, 3, 3, 1, 1}, 2, 3);
  auto b = make_eval({1, 1, 2, 2, 3, 3}, {7, 7, 5, 5, 6, 6}, 2, 3);
  CHECK(fg_ari(a) == doctest::Approx(fg_ari(b)));
}

TEST_CASE("miou and mbo: identities and the half-cover case") {
  auto perfect = make_eval({1, 1, 2, 2}, {5, 5, 9, 9}, 2, 2);
  CHECK(miou(perfect) == doctest::Approx(1.0));
  CHECK(mbo(perfect) == doctest::Approx(1.0));

  // one prediction covering everything, two equal gt halves
  auto half = make_eval({1, 1, 2, 2}, {3, 3, 3, 3}, 2, 2);
  CHECK(mbo(half) == doctest::Approx(0.5));

  // best-overlap relaxation: mbo >= miou on random instances
  Rng rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<int> gt(16), pred(16);
    for (auto& v : gt) v = rng.uniform_int(1, 3);
    for (auto& v : pred) v = rng.uniform_int(1, 4);
    auto e = make_eval(gt, pred, 4, 4);
    CHECK(mbo(e) >= miou(e) - 1e-12);
  }
}

TEST_CASE("dci: identity, uniform, and the 2x2 worked example") {
  ImportanceMatrix id;
  id.R = Tensor({3, 3});
  for (int i = 0; i < 3; ++i) id.R[static_cast<size_t>(i) * 3 + i] = 0.7;
  CHECK(dci_disentanglement(id) == doctest::Approx(1.0).epsilon(1e-12));

  ImportanceMatrix uni;
  uni.R = Tensor::full({4, 3}, 0.25);
  CHECK(dci_disentanglement(uni) == doctest::Approx(0.0).epsilon(1e-12));

  ImportanceMatrix ex;
  ex.R = Tensor::from({2, 2}, {0.9, 0.1, 0.5, 0.5});
  const double h1 = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  const double expected = 0.5 * (1.0 - h1 / std::log(2.0));
  CHECK(dci_disentanglement(ex) == doctest::Approx(expected).epsilon(1e-9));

  // invariance to positive row rescaling of rho (weights shift, D_j fixed):
  // scaling a row scales its weight, so test the normalized-rho invariance on
  // a matrix with equal row sums after scaling
  ImportanceMatrix sc;
  sc.R = Tensor::from({2, 2}, {9, 1, 5, 5});  // rows scaled by 10
  CHECK(dci_disentanglement(sc) == doctest::Approx(expected).epsilon(1e-9));

  ImportanceMatrix zero_row;
  zero_row.R = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 0.0});
  CHECK(dci_disentanglement(zero_row) == doctest::Approx(1.0).epsilon(1e-12));

  ImportanceMatrix bad;
  bad.R = Tensor::from({1, 1}, {1.0});
  CHECK_THROWS_AS(dci_disentanglement(bad), std::invalid_argument);
}

TEST_CASE("importance matrix probe: copy, noise, and permutation structure") {
  Rng rng(11);
  const int n = 600, d = 3;
  std::vector<double> lat(static_cast<size_t>(n) * d);
  std::vector<int> fac(static_cast<size_t>(n) * d);
  std::vector<int> cards = {3, 3, 3};
  for (int i = 0; i < n; ++i)
    for (int f = 0; f < d; ++f) {
      const int v = rng.uniform_int(0, 2);
      fac[static_cast<size_t>(i) * d + f] = v;
      lat[static_cast<size_t>(i) * d + f] = v + 0.01 * rng.normal();
    }
  ProbeConfig pc;
  pc.seed = 5;
  auto im = importance_matrix(lat, n, d, fac, cards, pc);
  // columns concentrate on the matching latent dim
  for (int m = 0; m < d; ++m) {
    double col = 0;
    for (int j = 0; j < d; ++j) col += im.R[static_cast<size_t>(j) * d + m];
    for (int j = 0; j < d; ++j) {
      const double frac = im.R[static_cast<size_t>(j) * d + m] / col;
      if (j == m) CHECK(frac > 0.95);
      else CHECK(frac < 0.05);
    }
  }
  CHECK(dci_disentanglement(im) > 0.9);

  // permuted copy: importance follows the permutation
  std::vector<double> lat_p(lat.size());
  const int perm[3] = {2, 0, 1};  // latent j carries factor perm[j]
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      lat_p[static_cast<size_t>(i) * d + j] = fac[static_cast<size_t>(i) * d + perm[j]] + 0.01 * rng.normal();
  auto imp = importance_matrix(lat_p, n, d, fac, cards, pc);
  for (int j = 0; j < d; ++j) {
    int arg = 0;
    for (int m = 1; m < d; ++m)
      if (imp.R[static_cast<size_t>(j) * d + m] > imp.R[static_cast<size_t>(j) * d + arg]) arg = m;
    CHECK(arg == perm[j]);
  }

  // noise latents: spread importances, near-zero disentanglement
  std::vector<double> noise(lat.size());
  for (auto& v : noise) v = rng.normal();
  auto imn = importance_matrix(noise, n, d, fac, cards, pc);
  CHECK(dci_disentanglement(imn) < 0.25);

  std::vector<int> constant_col = fac;
  for (int i = 0; i < n; ++i) constant_col[static_cast<size_t>(i) * d + 1] = 0;
  CHECK_THROWS_AS(importance_matrix(lat, n, d, constant_col, cards, pc), std::invalid_argument);
  CHECK_THROWS_AS(importance_matrix(lat, d, d, fac, cards, pc), std::invalid_argument);
}

TEST_CASE("pca post-processing: D=1 identity up to sign, norm preservation, explained variance") {
  Rng rng(13);
  std::vector<Tensor> sets;
  for (int i = 0; i < 200; ++i) sets.push_back(Tensor::randn({2, 1}, rng));
  auto one = fit_pca(sets, 1);
  for (int i = 0; i < 5; ++i) {
    const auto p = one.project(sets[static_cast<size_t>(i)]);
    for (int k = 0; k < 2; ++k) {
      const double centered = sets[static_cast<size_t>(i)][static_cast<size_t>(k)] -
                              one.mean[static_cast<size_t>(k)][0];
      CHECK(std::fabs(std::fabs(p[static_cast<size_t>(k)]) - std::fabs(centered)) < 1e-9);
    }
  }

  std::vector<Tensor> sets3;
  for (int i = 0; i < 300; ++i) sets3.push_back(Tensor::randn({1, 3}, rng));
  auto full = fit_pca(sets3, 3);
  CHECK(full.explained_fraction[0] == doctest::Approx(1.0));
  for (int i = 0; i < 10; ++i) {
    const auto p = full.project(sets3[static_cast<size_t>(i)]);
    double pn = 0, cn = 0;
    for (int j = 0; j < 3; ++j) {
      pn += p[static_cast<size_t>(j)] * p[static_cast<size_t>(j)];
      const double c = sets3[static_cast<size_t>(i)][static_cast<size_t>(j)] - full.mean[0][static_cast<size_t>(j)];
      cn += c * c;
    }
    CHECK(std::sqrt(pn) == doctest::Approx(std::sqrt(cn)).epsilon(1e-9));
  }
  CHECK_THROWS_AS(fit_pca(sets3, 4), std::invalid_argument);
}

namespace {

// toy attribute world where the representation oracle can invert the renderer
struct AttrWorld {
  data::AttrRecipe recipe;
  data::FactorDataset ds;
  std::map<std::string, std::vector<int>> lookup;  // quantized image bytes -> tuple

  AttrWorld() {
    recipe.cardinalities = {3, 3, 2};
    ds = data::gen_attr(recipe);
    for (int i = 0; i < ds.n; ++i)
      lookup[key(ds.image01(i))] = std::vector<int>(ds.factor_row(i), ds.factor_row(i) + ds.factor_count());
  }
  static std::string key(const Tensor& img) {
    std::string k;
    k.reserve(img.numel());
    for (size_t i = 0; i < img.numel(); ++i)
      k.push_back(static_cast<char>(std::lround(img[i] * 255.0)));
    return k;
  }
};

}  // namespace

TEST_CASE("factorvae score: ground-truth representation scores 1.0; noise scores chance") {
  AttrWorld world;
  RepFn truth = [&](const Tensor& img) {
    const auto& t = world.lookup.at(AttrWorld::key(img));
    return std::vector<double>(t.begin(), t.end());
  };
  FactorVaeConfig cfg;
  cfg.votes = 300;
  cfg.batch = 32;
  cfg.global_sample = 128;
  cfg.seed = 17;
  CHECK(factorvae_score(truth, world.ds, cfg) == doctest::Approx(1.0));

  // pure noise independent of the factors: fresh draws per call (a fixed
  // random function of the small tuple grid would be learnable)
  auto noise_rng = std::make_shared<Rng>(4242);
  RepFn noise = [noise_rng](const Tensor&) {
    std::vector<double> v(4);
    for (auto& x : v) x = noise_rng->normal();
    return v;
  };
  const double chance = factorvae_score(noise, world.ds, cfg);
  const double p = 1.0 / world.ds.factor_count();
  const double se = std::sqrt(p * (1 - p) / (cfg.votes / 2));
  CHECK(std::fabs(chance - p) < 3 * se + 0.02);

  // affine per-coordinate rescaling leaves the chosen coordinate unchanged
  RepFn scaled = [&](const Tensor& img) {
    auto v = truth(img);
    for (size_t j = 0; j < v.size(); ++j) v[j] = v[j] * (3.5 + static_cast<double>(j)) - 2.0;
    return v;
  };
  CHECK(factorvae_score(scaled, world.ds, cfg) == doctest::Approx(1.0));
}

TEST_CASE("gram loss: zero at identity, symmetric, separates palette styles") {
  GramExtractor gram;
  Rng rng(19);
  Tensor x = Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0);
  Tensor y = Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0);
  CHECK(gram.loss(x, x) == doctest::Approx(0.0));
  CHECK(gram.loss(x, y) == doctest::Approx(gram.loss(y, x)).epsilon(1e-12));
  CHECK(gram.loss(x, y) > 0.0);
  CHECK_THROWS_AS(gram.loss(x, Tensor({3, 8, 8})), std::invalid_argument);

  // 1x1 spatial features: Frobenius distance of f f^T / C computed by hand
  Tensor a = Tensor::uniform({3, 1, 1}, rng, 0.0, 1.0);
  Tensor b = Tensor::uniform({3, 1, 1}, rng, 0.0, 1.0);
  const auto ga = gram.grams(a);
  const auto gb = gram.grams(b);
  double manual = 0;
  for (size_t l = 0; l < ga.size(); ++l)
    for (size_t i = 0; i < ga[l].numel(); ++i) {
      const double d = ga[l][i] - gb[l][i];
      manual += d * d;
    }
  CHECK(gram.loss(a, b) == doctest::Approx(manual).epsilon(1e-12));
  // the gram of a 1x1xC feature map f is f f^T / C: check PSD rank-1 structure
  for (const auto& G : ga) {
    const int C = G.dim(0);
    for (int i = 0; i < C; ++i)
      for (int j = 0; j < C; ++j) {
        const double gij = G[static_cast<size_t>(i) * C + j];
        const double gii = G[static_cast<size_t>(i) * C + i];
        const double gjj = G[static_cast<size_t>(j) * C + j];
        CHECK(gij * gij <= gii * gjj + 1e-12);  // Cauchy-Schwarz with equality for rank 1
        CHECK(gij * gij == doctest::Approx(gii * gjj).epsilon(1e-9));
      }
  }

  // dataset oracle: same-style pairs have strictly smaller mean loss
  data::StyleRecipe sr;
  sr.base.n = 60;
  sr.base.seed = 23;
  auto ds = data::gen_style(sr);
  double same = 0, diff = 0;
  int ns = 0, nd = 0;
  for (int i = 0; i < 100; ++i) {
    const int sa = i % 60, sb = (i * 7 + 13) % 60;
    const int style = i % data::kNumStyles;
    const int other = (style + 1 + i % 3) % data::kNumStyles;
    same += gram.loss(ds.image01(sa * 4 + style), ds.image01(sb * 4 + style));
    ++ns;
    diff += gram.loss(ds.image01(sa * 4 + style), ds.image01(sb * 4 + other));
    ++nd;
  }
  CHECK(same / ns < diff / nd);
}

TEST_CASE("style oracle separates the four palette styles") {
  data::StyleRecipe sr;
  sr.base.n = 150;
  sr.base.seed = 29;
  auto ds = data::gen_style(sr);
  StyleOracle oracle;
  oracle.fit(ds, data::Split::Train);
  CHECK(oracle.accuracy(ds, data::Split::Test) >= 0.99);
  CHECK(oracle.accuracy(ds, data::Split::Val) >= 0.99);
}

TEST_CASE("mlp probes: separable labels, shuffled chance, regression") {
  Rng rng(31);
  const int n = 400, d = 6;
  std::vector<double> X(static_cast<size_t>(n) * d);
  for (auto& v : X) v = rng.normal();
  std::vector<int> y(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    // margin around the boundary keeps the toy genuinely separable
    const int label = rng.uniform() < 0.5 ? 1 : 0;
    X[static_cast<size_t>(i) * d + 2] = (label ? 1.0 : -1.0) * (0.2 + rng.uniform());
    y[static_cast<size_t>(i)] = label;
  }
  MlpProbeConfig cfg;
  cfg.seed = 33;
  cfg.epochs = 300;
  CHECK(probe_classify(X, n, d, y, 2, cfg) >= 0.99);

  std::vector<int> shuffled = y;
  Rng srng(35);
  srng.shuffle(shuffled);
  const double chance = probe_classify(X, n, d, shuffled, 2, cfg);
  CHECK(std::fabs(chance - 0.5) < 3 * std::sqrt(0.25 / 80) + 0.05);

  std::vector<double> t(static_cast<size_t>(n) * 2);
  for (int i = 0; i < n; ++i) {
    t[static_cast<size_t>(i) * 2] = 0.5 * X[static_cast<size_t>(i) * d] + 0.1;
    t[static_cast<size_t>(i) * 2 + 1] = -X[static_cast<size_t>(i) * d + 1];
  }
  CHECK(probe_regress(X, n, d, t, 2, cfg) < 0.02);

  std::vector<int> tiny_class = y;
  tiny_class[0] = 5;  // a 6th class with one example
  CHECK_THROWS_AS(probe_classify(X, n, d, tiny_class, 6, cfg), std::invalid_argument);
}

namespace {

// additive-renderer world: slot k paints vertical stripe k with a color that
// is a fixed function of z_k; encode reads the stripe colors back
struct StripeWorld {
  int K = 4, D = 3, S = 32;
  int stripe_w() const { return S / K; }
  Tensor decode(const Tensor& z) const {
    Tensor img({3, S, S});
    for (int k = 0; k < K; ++k)
      for (int y = 0; y < S; ++y)
        for (int x = k * stripe_w(); x < (k + 1) * stripe_w(); ++x)
          for (int c = 0; c < 3; ++c)
            img[(static_cast<size_t>(c) * S + y) * S + x] =
                0.5 + 0.4 * std::tanh(z[static_cast<size_t>(k) * D + c]);
    return img;
  }
  Tensor encode(const Tensor& img) const {
    Tensor z({K, D});
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < 3; ++c) {
        const double v = img[(static_cast<size_t>(c) * S) * S + k * stripe_w()];
        z[static_cast<size_t>(k) * D + c] = std::atanh(std::clamp((v - 0.5) / 0.4, -0.999, 0.999));
      }
    return z;
  }
};

}  // namespace

TEST_CASE("match_latents: stripes recovered, masks partition, empty slot flagged") {
  StripeWorld world;
  Rng rng(37);
  EncodeFn enc = [&](const Tensor& img) { return world.encode(img); };
  DecodeFn dec = [&](const Tensor& z) { return world.decode(z); };
  Tensor z = Tensor::randn({world.K, world.D}, rng);
  const Tensor x = world.decode(z);
  std::vector<Tensor> refs;
  for (int b = 0; b < 6; ++b) refs.push_back(world.decode(Tensor::randn({world.K, world.D}, rng)));
  const auto match = match_latents(z, x, refs, enc, dec);
  // per-slot IoU against the true stripe
  for (int k = 0; k < world.K; ++k) {
    double inter = 0, uni = 0;
    for (int y = 0; y < world.S; ++y)
      for (int x2 = 0; x2 < world.S; ++x2) {
        const bool in_true = x2 / world.stripe_w() == k;
        const bool in_pred = match.slot_of_pixel[static_cast<size_t>(y) * world.S + x2] == k;
        inter += in_true && in_pred;
        uni += in_true || in_pred;
      }
    CHECK(inter / uni >= 0.9);
  }
  for (int p = 0; p < world.S * world.S; ++p) {
    CHECK(match.slot_of_pixel[static_cast<size_t>(p)] >= 0);
    CHECK(match.slot_of_pixel[static_cast<size_t>(p)] < world.K);
  }
  for (int k = 0; k < world.K; ++k) CHECK(match.empty_slot[static_cast<size_t>(k)] == 0);

  // a decoder that ignores slot 2 marks it empty
  DecodeFn dec_dead = [&](const Tensor& zz) {
    Tensor z2 = zz;
    for (int c = 0; c < world.D; ++c) z2[static_cast<size_t>(2) * world.D + c] = 0.0;
    return world.decode(z2);
  };
  const auto dead = match_latents(z, x, refs, enc, dec_dead);
  CHECK(dead.empty_slot[2] == 1);
  CHECK(dead.empty_slot[0] == 0);
  CHECK_THROWS_AS(match_latents(z, x, {refs[0]}, enc, dec), std::invalid_argument);
}

TEST_CASE("sbd masks: single slot is all-ones; one-hot region codes are recovered") {
  // K=1: softmax over one slot is identically 1
  Rng rng(41);
  std::vector<Tensor> lat1, img1;
  for (int i = 0; i < 8; ++i) {
    lat1.push_back(Tensor::randn({1, 4}, rng));
    img1.push_back(Tensor::uniform({3, 32, 32}, rng, 0.0, 1.0));
  }
  SbdConfig quick;
  quick.steps = 5;
  quick.seed = 43;
  const auto m1 = sbd_masks(lat1, img1, quick);
  for (const auto& m : m1)
    for (size_t i = 0; i < m.numel(); ++i) CHECK(m[i] == doctest::Approx(1.0));

  // K=4 quadrants, one-hot codes; images color each quadrant by its slot
  const int S = 16, K = 4;
  std::vector<Tensor> lat, img;
  Rng crng(47);
  for (int i = 0; i < 24; ++i) {
    Tensor z({K, K});
    std::vector<int> assign(K);
    for (int k = 0; k < K; ++k) assign[static_cast<size_t>(k)] = crng.uniform_int(0, 2);
    for (int k = 0; k < K; ++k) z[static_cast<size_t>(k) * K + k] = 1.0 + assign[static_cast<size_t>(k)];
    Tensor im({3, S, S});
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const int q = (y < S / 2 ? 0 : 2) + (x < S / 2 ? 0 : 1);
        for (int c = 0; c < 3; ++c)
          im[(static_cast<size_t>(c) * S + y) * S + x] =
              c == assign[static_cast<size_t>(q)] ? 0.9 : 0.1;
      }
    lat.push_back(std::move(z));
    img.push_back(std::move(im));
  }
  SbdConfig cfg;
  cfg.steps = 2500;
  cfg.batch = 8;
  cfg.seed = 49;
  cfg.broadcast = 4;
  const auto masks = sbd_masks(lat, img, cfg);
  double iou_acc = 0;
  int cnt = 0;
  for (size_t i = 0; i < masks.size(); ++i) {
    // soft masks sum to one per pixel
    for (int p = 0; p < S * S; ++p) {
      double s = 0;
      for (int k = 0; k < K; ++k) s += masks[i][static_cast<size_t>(k) * S * S + p];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    // hungarian-free check: slot k should own quadrant k (codes are aligned)
    for (int k = 0; k < K; ++k) {
      double inter = 0, uni = 0;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const int q = (y < S / 2 ? 0 : 2) + (x < S / 2 ? 0 : 1);
          int arg = 0;
          for (int kk = 1; kk < K; ++kk)
            if (masks[i][static_cast<size_t>(kk) * S * S + y * S + x] >
                masks[i][static_cast<size_t>(arg) * S * S + y * S + x])
              arg = kk;
          const bool in_true = q == k;
          const bool in_pred = arg == k;
          inter += in_true && in_pred;
          uni += in_true || in_pred;
        }
      iou_acc += inter / uni;
      ++cnt;
    }
  }
  CHECK(iou_acc / cnt >= 0.8);
}

TEST_CASE("segmentation eval validation") {
  SegmentationEval bad;
  bad.h = 2;
  bad.w = 2;
  bad.gt = {1, 1, 2, 2};
  bad.pred = {1, 1};
  bad.fg = {1, 1, 1, 1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  SegmentationEval nofg = make_eval({1, 1, 2, 2}, {1, 1, 2, 2}, 2, 2);
  nofg.fg.assign(4, 0);
  CHECK_THROWS_AS(fg_ari(nofg), std::invalid_argument);
}
