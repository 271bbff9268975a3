#include "compdis/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>

#include "compdis/assignment.hpp"
#include "compdis/graph.hpp"
#include "compdis/rng.hpp"

namespace compdis::metrics {

// ---------------------------------------------------------------------------
// FactorVAE score
// ---------------------------------------------------------------------------

double factorvae_score(const RepFn& rep, const data::FactorDataset& ds, const FactorVaeConfig& cfg) {
  if (ds.kind != data::DatasetKind::Attribute || ds.factor_count() < 2)
    throw std::invalid_argument("factorvae_score: attribute dataset with >= 2 factors required");
  const auto recipe = data::attr_recipe_from_json(ds.recipe_json);
  const int F = ds.factor_count();
  Rng rng(cfg.seed);

  auto random_tuple = [&](int fixed_f, int fixed_v) {
    std::vector<int> t(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f)
      t[static_cast<size_t>(f)] = rng.uniform_int(0, ds.cardinalities[static_cast<size_t>(f)] - 1);
    if (fixed_f >= 0) t[static_cast<size_t>(fixed_f)] = fixed_v;
    return t;
  };

  // per-coordinate global std
  std::vector<double> sum, sum2;
  int d = 0;
  for (int i = 0; i < cfg.global_sample; ++i) {
    const auto v = rep(data::render_attr_image01(random_tuple(-1, 0), recipe));
    if (i == 0) {
      d = static_cast<int>(v.size());
      sum.assign(static_cast<size_t>(d), 0.0);
      sum2.assign(static_cast<size_t>(d), 0.0);
    }
    if (static_cast<int>(v.size()) != d) throw std::runtime_error("factorvae_score: rep dim varies");
    for (int j = 0; j < d; ++j) {
      sum[static_cast<size_t>(j)] += v[static_cast<size_t>(j)];
      sum2[static_cast<size_t>(j)] += v[static_cast<size_t>(j)] * v[static_cast<size_t>(j)];
    }
  }
  std::vector<double> gstd(static_cast<size_t>(d));
  std::vector<bool> excluded(static_cast<size_t>(d), false);
  for (int j = 0; j < d; ++j) {
    const double mean = sum[static_cast<size_t>(j)] / cfg.global_sample;
    const double var = std::max(0.0, sum2[static_cast<size_t>(j)] / cfg.global_sample - mean * mean);
    gstd[static_cast<size_t>(j)] = std::sqrt(var);
    excluded[static_cast<size_t>(j)] = gstd[static_cast<size_t>(j)] < 1e-9;
  }
  if (std::all_of(excluded.begin(), excluded.end(), [](bool b) { return b; }))
    throw std::runtime_error("factorvae_score: all coordinates have zero variance");

  std::vector<std::pair<int, int>> votes;  // (coordinate, factor)
  for (int round = 0; round < cfg.votes; ++round) {
    const int f = round % F;
    const int val = rng.uniform_int(0, ds.cardinalities[static_cast<size_t>(f)] - 1);
    std::vector<double> bsum(static_cast<size_t>(d), 0.0), bsum2(static_cast<size_t>(d), 0.0);
    for (int b = 0; b < cfg.batch; ++b) {
      const auto v = rep(data::render_attr_image01(random_tuple(f, val), recipe));
      for (int j = 0; j < d; ++j) {
        const double z = v[static_cast<size_t>(j)] / (gstd[static_cast<size_t>(j)] + 1e-12);
        bsum[static_cast<size_t>(j)] += z;
        bsum2[static_cast<size_t>(j)] += z * z;
      }
    }
    int jmin = -1;
    double best = 0;
    for (int j = 0; j < d; ++j) {
      if (excluded[static_cast<size_t>(j)]) continue;
      const double mean = bsum[static_cast<size_t>(j)] / cfg.batch;
      const double var = std::max(0.0, bsum2[static_cast<size_t>(j)] / cfg.batch - mean * mean);
      if (jmin < 0 || var < best) {
        jmin = j;
        best = var;
      }
    }
    votes.emplace_back(jmin, f);
  }

  const size_t half = votes.size() / 2;
  std::vector<std::vector<int>> counts(static_cast<size_t>(d), std::vector<int>(static_cast<size_t>(F), 0));
  for (size_t i = 0; i < half; ++i)
    ++counts[static_cast<size_t>(votes[i].first)][static_cast<size_t>(votes[i].second)];
  std::vector<int> majority(static_cast<size_t>(d), 0);
  for (int j = 0; j < d; ++j) {
    int best_f = 0;
    for (int f = 1; f < F; ++f)
      if (counts[static_cast<size_t>(j)][static_cast<size_t>(f)] >
          counts[static_cast<size_t>(j)][static_cast<size_t>(best_f)])
        best_f = f;
    majority[static_cast<size_t>(j)] = best_f;
  }
  int correct = 0;
  for (size_t i = half; i < votes.size(); ++i)
    if (majority[static_cast<size_t>(votes[i].first)] == votes[i].second) ++correct;
  return static_cast<double>(correct) / static_cast<double>(votes.size() - half);
}

// ---------------------------------------------------------------------------
// DCI
// ---------------------------------------------------------------------------

double dci_disentanglement(const ImportanceMatrix& im) {
  const Tensor& R = im.R;
  if (R.rank() != 2 || R.dim(1) < 2) throw std::invalid_argument("dci: R must be (d, M>=2)");
  const int d = R.dim(0), M = R.dim(1);
  for (size_t i = 0; i < R.numel(); ++i)
    if (!(R[i] >= 0.0) || !std::isfinite(R[i]))
      throw std::invalid_argument("dci: importances must be finite and non-negative");
  const double logM = std::log(static_cast<double>(M));
  double wsum = 0.0, acc = 0.0;
  for (int j = 0; j < d; ++j) {
    double rowsum = 0.0;
    for (int m = 0; m < M; ++m) rowsum += R[static_cast<size_t>(j) * M + m];
    if (rowsum <= 0.0) continue;  // unused latent dimension
    double H = 0.0;
    for (int m = 0; m < M; ++m) {
      const double p = R[static_cast<size_t>(j) * M + m] / rowsum;
      if (p > 0) H -= p * std::log(p);
    }
    const double Dj = 1.0 - H / logM;
    acc += rowsum * Dj;
    wsum += rowsum;
  }
  return wsum > 0 ? acc / wsum : 0.0;
}

namespace {

std::vector<double> l1_linear_importance(const std::vector<double>& X, int n, int d,
                                         const std::vector<int>& y, int n_classes, double lambda,
                                         uint64_t /*seed*/) {
  // one-vs-rest least squares with L1 shrinkage via coordinate descent
  std::vector<double> mean(static_cast<size_t>(d), 0.0), std(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += X[static_cast<size_t>(i) * d + j];
  for (auto& v : mean) v /= n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const double c = X[static_cast<size_t>(i) * d + j] - mean[static_cast<size_t>(j)];
      std[static_cast<size_t>(j)] += c * c;
    }
  for (auto& v : std) v = std::sqrt(v / n) + 1e-12;

  std::vector<double> imp(static_cast<size_t>(d), 0.0);
  std::vector<double> Xs(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      Xs[static_cast<size_t>(i) * d + j] =
          (X[static_cast<size_t>(i) * d + j] - mean[static_cast<size_t>(j)]) / std[static_cast<size_t>(j)];
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> t(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) t[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] == c ? 1.0 : 0.0;
    std::vector<double> w(static_cast<size_t>(d), 0.0), resid = t;
    for (int it = 0; it < 50; ++it)
      for (int j = 0; j < d; ++j) {
        double rho = 0, zz = 0;
        for (int i = 0; i < n; ++i) {
          const double xi = Xs[static_cast<size_t>(i) * d + j];
          rho += xi * (resid[static_cast<size_t>(i)] + xi * w[static_cast<size_t>(j)]);
          zz += xi * xi;
        }
        const double wj_old = w[static_cast<size_t>(j)];
        double wj = 0.0;
        if (rho > lambda * n) wj = (rho - lambda * n) / zz;
        else if (rho < -lambda * n) wj = (rho + lambda * n) / zz;
        if (wj != wj_old) {
          for (int i = 0; i < n; ++i)
            resid[static_cast<size_t>(i)] -= Xs[static_cast<size_t>(i) * d + j] * (wj - wj_old);
          w[static_cast<size_t>(j)] = wj;
        }
      }
    for (int j = 0; j < d; ++j) imp[static_cast<size_t>(j)] += std::fabs(w[static_cast<size_t>(j)]);
  }
  double total = 0;
  for (double v : imp) total += v;
  if (total > 0)
    for (auto& v : imp) v /= total;
  return imp;
}

}  // namespace

ImportanceMatrix importance_matrix(const std::vector<double>& latents, int n, int d,
                                   const std::vector<int>& factors, const std::vector<int>& cards,
                                   const ProbeConfig& cfg) {
  const int M = static_cast<int>(cards.size());
  if (n < 10 * d) throw std::invalid_argument("importance_matrix: need N >= 10*d samples");
  if (latents.size() != static_cast<size_t>(n) * d || factors.size() != static_cast<size_t>(n) * M)
    throw std::invalid_argument("importance_matrix: size mismatch");
  ImportanceMatrix im;
  im.R = Tensor({d, M});
  im.provenance = cfg.kind == ProbeConfig::Kind::Trees ? "tree-ensemble" : "l1-linear";
  for (int m = 0; m < M; ++m) {
    std::vector<int> y(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) y[static_cast<size_t>(i)] = factors[static_cast<size_t>(i) * M + m];
    const int first = y[0];
    if (std::all_of(y.begin(), y.end(), [&](int v) { return v == first; }))
      throw std::invalid_argument("importance_matrix: degenerate constant factor column");
    std::vector<double> col;
    if (cfg.kind == ProbeConfig::Kind::Trees) {
      ForestConfig fc = cfg.forest;
      fc.seed = cfg.seed * 1000003ULL + static_cast<uint64_t>(m);
      col = forest_importance(latents, n, d, y, cards[static_cast<size_t>(m)], fc);
    } else {
      col = l1_linear_importance(latents, n, d, y, cards[static_cast<size_t>(m)], cfg.l1, cfg.seed);
    }
    for (int j = 0; j < d; ++j) im.R[static_cast<size_t>(j) * M + m] = col[static_cast<size_t>(j)];
  }
  return im;
}

// ---------------------------------------------------------------------------
// PCA post-processing
// ---------------------------------------------------------------------------

PcaModel fit_pca(const std::vector<Tensor>& latent_sets, int comps) {
  if (latent_sets.empty()) throw std::invalid_argument("fit_pca: no data");
  const int K = latent_sets[0].dim(0), D = latent_sets[0].dim(1);
  if (comps < 1 || comps > D) throw std::invalid_argument("fit_pca: component count out of range");
  const int N = static_cast<int>(latent_sets.size());
  PcaModel model;
  model.K = K;
  model.D = D;
  model.comps = comps;
  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd Xk(N, D);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < D; ++j) Xk(i, j) = latent_sets[static_cast<size_t>(i)][static_cast<size_t>(k) * D + j];
    Eigen::VectorXd mu = Xk.colwise().mean();
    Xk.rowwise() -= mu.transpose();
    Eigen::MatrixXd cov = Xk.transpose() * Xk / std::max(1, N - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Tensor mean({D}), basis({D, comps});
    for (int j = 0; j < D; ++j) mean[static_cast<size_t>(j)] = mu(j);
    double total = 0, kept = 0;
    for (int j = 0; j < D; ++j) total += std::max(0.0, es.eigenvalues()(j));
    for (int c = 0; c < comps; ++c) {
      const int src = D - 1 - c;  // eigenvalues ascend in Eigen
      kept += std::max(0.0, es.eigenvalues()(src));
      Eigen::VectorXd v = es.eigenvectors().col(src);
      int arg = 0;
      for (int j = 1; j < D; ++j)
        if (std::fabs(v(j)) > std::fabs(v(arg))) arg = j;
      if (v(arg) < 0) v = -v;  // deterministic sign
      for (int j = 0; j < D; ++j) basis[static_cast<size_t>(j) * comps + c] = v(j);
    }
    model.mean.push_back(std::move(mean));
    model.basis.push_back(std::move(basis));
    model.explained_fraction.push_back(total > 0 ? kept / total : 1.0);
  }
  return model;
}

std::vector<double> PcaModel::project(const Tensor& latent_set) const {
  if (latent_set.rank() != 2 || latent_set.dim(0) != K || latent_set.dim(1) != D)
    throw std::invalid_argument("PcaModel::project: shape mismatch");
  std::vector<double> out(static_cast<size_t>(K) * comps, 0.0);
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < comps; ++c) {
      double s = 0;
      for (int j = 0; j < D; ++j)
        s += (latent_set[static_cast<size_t>(k) * D + j] - mean[static_cast<size_t>(k)][static_cast<size_t>(j)]) *
             basis[static_cast<size_t>(k)][static_cast<size_t>(j) * comps + c];
      out[static_cast<size_t>(k) * comps + c] = s;
    }
  return out;
}

// ---------------------------------------------------------------------------
// segmentation metrics
// ---------------------------------------------------------------------------

void SegmentationEval::validate() const {
  const size_t n = static_cast<size_t>(h) * w;
  if (n == 0 || pred.size() != n || gt.size() != n || fg.size() != n)
    throw std::invalid_argument("SegmentationEval: label arrays must share the spatial shape");
}

namespace {

double comb2(double n) { return n * (n - 1.0) / 2.0; }

std::map<int, int> compact_ids(const std::vector<int>& labels, const std::vector<uint8_t>& keep) {
  std::map<int, int> ids;
  for (size_t i = 0; i < labels.size(); ++i)
    if (keep[i] && !ids.count(labels[i])) ids.emplace(labels[i], static_cast<int>(ids.size()));
  return ids;
}

}  // namespace

double fg_ari(const SegmentationEval& ev) {
  ev.validate();
  size_t nfg = 0;
  for (uint8_t b : ev.fg) nfg += b ? 1 : 0;
  if (nfg == 0) throw std::invalid_argument("fg_ari: empty foreground");
  const auto gids = compact_ids(ev.gt, ev.fg);
  const auto pids = compact_ids(ev.pred, ev.fg);
  std::vector<std::vector<double>> cont(gids.size(), std::vector<double>(pids.size(), 0.0));
  for (size_t i = 0; i < ev.fg.size(); ++i)
    if (ev.fg[i]) cont[static_cast<size_t>(gids.at(ev.gt[i]))][static_cast<size_t>(pids.at(ev.pred[i]))] += 1.0;
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  std::vector<double> a(gids.size(), 0.0), b(pids.size(), 0.0);
  for (size_t i = 0; i < gids.size(); ++i)
    for (size_t j = 0; j < pids.size(); ++j) {
      sum_ij += comb2(cont[i][j]);
      a[i] += cont[i][j];
      b[j] += cont[i][j];
    }
  for (double v : a) sum_a += comb2(v);
  for (double v : b) sum_b += comb2(v);
  const double expected = sum_a * sum_b / comb2(static_cast<double>(nfg));
  const double denom = 0.5 * (sum_a + sum_b) - expected;
  if (std::fabs(denom) < 1e-12) return 1.0;  // both partitions trivial and equal
  return (sum_ij - expected) / denom;
}

namespace {

// IoU matrix between gt label set and pred label set over all pixels
struct IoUTable {
  std::vector<int> gt_labels, pred_labels;
  std::vector<std::vector<double>> iou;  // [gt][pred]
};

IoUTable iou_table(const SegmentationEval& ev) {
  std::set<int> gset(ev.gt.begin(), ev.gt.end());
  std::set<int> pset(ev.pred.begin(), ev.pred.end());
  IoUTable t;
  t.gt_labels.assign(gset.begin(), gset.end());
  t.pred_labels.assign(pset.begin(), pset.end());
  std::map<int, int> gi, pi;
  for (size_t i = 0; i < t.gt_labels.size(); ++i) gi[t.gt_labels[i]] = static_cast<int>(i);
  for (size_t i = 0; i < t.pred_labels.size(); ++i) pi[t.pred_labels[i]] = static_cast<int>(i);
  std::vector<std::vector<double>> inter(t.gt_labels.size(), std::vector<double>(t.pred_labels.size(), 0));
  std::vector<double> gsz(t.gt_labels.size(), 0), psz(t.pred_labels.size(), 0);
  for (size_t i = 0; i < ev.gt.size(); ++i) {
    const int a = gi[ev.gt[i]], b = pi[ev.pred[i]];
    inter[static_cast<size_t>(a)][static_cast<size_t>(b)] += 1.0;
    gsz[static_cast<size_t>(a)] += 1.0;
    psz[static_cast<size_t>(b)] += 1.0;
  }
  t.iou.assign(t.gt_labels.size(), std::vector<double>(t.pred_labels.size(), 0.0));
  for (size_t a = 0; a < t.gt_labels.size(); ++a)
    for (size_t b = 0; b < t.pred_labels.size(); ++b) {
      const double u = gsz[a] + psz[b] - inter[a][b];
      t.iou[a][b] = u > 0 ? inter[a][b] / u : 0.0;
    }
  return t;
}

}  // namespace

double miou(const SegmentationEval& ev) {
  ev.validate();
  const auto t = iou_table(ev);
  const int G = static_cast<int>(t.gt_labels.size());
  const int P = static_cast<int>(t.pred_labels.size());
  const int K = std::max(G, P);
  Tensor cost({K, K});
  cost.fill(1.0);  // missing pairings contribute IoU 0
  for (int a = 0; a < G; ++a)
    for (int b = 0; b < P; ++b)
      cost[static_cast<size_t>(a) * K + b] = 1.0 - t.iou[static_cast<size_t>(a)][static_cast<size_t>(b)];
  const auto assignment = assign::hungarian(cost);
  double acc = 0;
  for (int a = 0; a < G; ++a) {
    const int b = assignment.perm[static_cast<size_t>(a)];
    acc += b < P ? t.iou[static_cast<size_t>(a)][static_cast<size_t>(b)] : 0.0;
  }
  return acc / G;
}

double mbo(const SegmentationEval& ev) {
  ev.validate();
  const auto t = iou_table(ev);
  double acc = 0;
  int count = 0;
  for (size_t a = 0; a < t.gt_labels.size(); ++a) {
    if (t.gt_labels[a] <= 0) continue;  // background is not an instance
    double best = 0;
    for (size_t b = 0; b < t.pred_labels.size(); ++b) best = std::max(best, t.iou[a][b]);
    acc += best;
    ++count;
  }
  if (count == 0) {
    std::fprintf(stderr, "mbo: no ground-truth instances present\n");
    return 0.0;
  }
  return acc / count;
}

// ---------------------------------------------------------------------------
// GRAM loss
// ---------------------------------------------------------------------------

GramExtractor::GramExtractor(uint64_t seed) {
  Rng rng(seed);
  auto init = [&](int co, int ci) { return Tensor::randn({co, ci, 3, 3}, rng, std::sqrt(2.0 / (ci * 9))); };
  w1_ = init(8, 3);
  b1_ = Tensor({8});
  w2_ = init(16, 8);
  b2_ = Tensor({16});
  w3_ = init(32, 16);
  b3_ = Tensor({32});
}

std::vector<Tensor> GramExtractor::grams(const Tensor& img01) const {
  if (img01.rank() != 3 || img01.dim(0) != 3) throw std::invalid_argument("GramExtractor: need (3,H,W)");
  Graph g;
  Graph::NoGrad ng(g);
  Var x = g.constant(img01.reshaped({1, 3, img01.dim(1), img01.dim(2)}));
  Var h1 = relu(conv2d(x, g.constant(w1_), g.constant(b1_), 1, 1));
  Var h2 = relu(conv2d(h1, g.constant(w2_), g.constant(b2_), 2, 1));
  Var h3 = relu(conv2d(h2, g.constant(w3_), g.constant(b3_), 2, 1));
  std::vector<Tensor> out;
  for (Var h : {h1, h2, h3}) {
    const Tensor& f = h.val();
    const int C = f.dim(1), HW = f.dim(2) * f.dim(3);
    Tensor gm({C, C});
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> F(
        f.data(), C, HW);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> G(gm.data(), C, C);
    G.noalias() = F * F.transpose() / static_cast<double>(C * HW);
    out.push_back(std::move(gm));
  }
  return out;
}

double GramExtractor::loss(const Tensor& x01, const Tensor& y01) const {
  if (!x01.same_shape(y01)) throw std::invalid_argument("GramExtractor::loss: resolution mismatch");
  const auto gx = grams(x01);
  const auto gy = grams(y01);
  double acc = 0;
  for (size_t l = 0; l < gx.size(); ++l)
    for (size_t i = 0; i < gx[l].numel(); ++i) {
      const double d = gx[l][i] - gy[l][i];
      acc += d * d;
    }
  return acc;
}

// ---------------------------------------------------------------------------
// style oracle
// ---------------------------------------------------------------------------

std::vector<double> StyleOracle::features(const Tensor& img01) {
  const size_t hw = static_cast<size_t>(img01.dim(1)) * img01.dim(2);
  double ms = 0, mv = 0, vv = 0, hs = 0, hc = 0;
  std::map<int, int> color_counts;  // 16-level quantized rgb
  for (size_t p = 0; p < hw; ++p) {
    const double r = img01[p], g = img01[hw + p], b = img01[2 * hw + p];
    const auto hsv = data::rgb_to_hsv(r, g, b);
    ms += hsv[1];
    mv += hsv[2];
    vv += hsv[2] * hsv[2];
    hs += hsv[1] * std::sin(2 * M_PI * hsv[0]);
    hc += hsv[1] * std::cos(2 * M_PI * hsv[0]);
    const int q = (std::min(15, static_cast<int>(r * 16)) << 8) |
                  (std::min(15, static_cast<int>(g * 16)) << 4) |
                  std::min(15, static_cast<int>(b * 16));
    ++color_counts[q];
  }
  ms /= hw;
  mv /= hw;
  vv = std::sqrt(std::max(0.0, vv / hw - mv * mv));
  // the dominant quantized color (in these scenes, the transformed background)
  int mode = 0, best = -1;
  for (auto [q, c] : color_counts)
    if (c > best) {
      best = c;
      mode = q;
    }
  const double mr = ((mode >> 8) & 15) / 15.0, mg = ((mode >> 4) & 15) / 15.0, mb = (mode & 15) / 15.0;
  return {ms, mv, vv, hs / hw, hc / hw, mr, mg, mb};
}

void StyleOracle::fit(const data::FactorDataset& ds, data::Split split) {
  if (ds.kind != data::DatasetKind::Style) throw std::invalid_argument("StyleOracle: style dataset required");
  const auto idx = ds.indices(split);
  if (idx.empty()) throw std::invalid_argument("StyleOracle: empty split");
  const int nf = 8;
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i : idx) {
    feats.push_back(features(ds.image01(i)));
    labels.push_back(ds.style[static_cast<size_t>(i)]);
  }
  feat_mean_.assign(nf, 0.0);
  for (const auto& fv : feats)
    for (int f = 0; f < nf; ++f) feat_mean_[static_cast<size_t>(f)] += fv[static_cast<size_t>(f)];
  for (auto& v : feat_mean_) v /= static_cast<double>(feats.size());

  // raw per-style means, then pooled WITHIN-class std: features that are
  // stable inside a style but move across styles get the weight they deserve
  std::vector<std::vector<double>> raw_centroids(data::kNumStyles, std::vector<double>(nf, 0.0));
  std::vector<int> counts(data::kNumStyles, 0);
  for (size_t k = 0; k < feats.size(); ++k) {
    for (int f = 0; f < nf; ++f)
      raw_centroids[static_cast<size_t>(labels[k])][static_cast<size_t>(f)] += feats[k][static_cast<size_t>(f)];
    ++counts[static_cast<size_t>(labels[k])];
  }
  for (int s = 0; s < data::kNumStyles; ++s) {
    if (counts[static_cast<size_t>(s)] == 0) throw std::invalid_argument("StyleOracle: missing style in split");
    for (auto& v : raw_centroids[static_cast<size_t>(s)]) v /= counts[static_cast<size_t>(s)];
  }
  feat_std_.assign(nf, 0.0);
  for (size_t k = 0; k < feats.size(); ++k)
    for (int f = 0; f < nf; ++f) {
      const double c = feats[k][static_cast<size_t>(f)] -
                       raw_centroids[static_cast<size_t>(labels[k])][static_cast<size_t>(f)];
      feat_std_[static_cast<size_t>(f)] += c * c;
    }
  for (auto& v : feat_std_) v = std::sqrt(v / static_cast<double>(feats.size())) + 1e-6;
  centroids_.assign(data::kNumStyles, std::vector<double>(nf, 0.0));
  for (int s = 0; s < data::kNumStyles; ++s)
    for (int f = 0; f < nf; ++f)
      centroids_[static_cast<size_t>(s)][static_cast<size_t>(f)] =
          (raw_centroids[static_cast<size_t>(s)][static_cast<size_t>(f)] - feat_mean_[static_cast<size_t>(f)]) /
          feat_std_[static_cast<size_t>(f)];
}

int StyleOracle::predict(const Tensor& img01) const {
  if (centroids_.empty()) throw std::logic_error("StyleOracle: fit() first");
  const auto fv = features(img01);
  int best = 0;
  double best_d = 0;
  for (size_t s = 0; s < centroids_.size(); ++s) {
    double d = 0;
    for (size_t f = 0; f < fv.size(); ++f) {
      const double z = (fv[f] - feat_mean_[f]) / feat_std_[f] - centroids_[s][f];
      d += z * z;
    }
    if (s == 0 || d < best_d) {
      best = static_cast<int>(s);
      best_d = d;
    }
  }
  return best;
}

double StyleOracle::accuracy(const data::FactorDataset& ds, data::Split split) const {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw std::invalid_argument("StyleOracle::accuracy: empty split");
  int correct = 0;
  for (int i : idx)
    if (predict(ds.image01(i)) == ds.style[static_cast<size_t>(i)]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------
// MLP probes
// ---------------------------------------------------------------------------

namespace {

struct ProbeData {
  std::vector<int> train_idx, test_idx;
  std::vector<double> mean, std;
};

ProbeData probe_split(const std::vector<double>& X, int n, int d, double train_frac, Rng& rng) {
  ProbeData pd;
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  rng.shuffle(idx);
  const int ntr = std::max(1, static_cast<int>(std::lround(train_frac * n)));
  pd.train_idx.assign(idx.begin(), idx.begin() + ntr);
  pd.test_idx.assign(idx.begin() + ntr, idx.end());
  if (pd.test_idx.empty()) throw std::invalid_argument("probe: not enough samples for a held-out split");
  pd.mean.assign(static_cast<size_t>(d), 0.0);
  pd.std.assign(static_cast<size_t>(d), 0.0);
  for (int i : pd.train_idx)
    for (int j = 0; j < d; ++j) pd.mean[static_cast<size_t>(j)] += X[static_cast<size_t>(i) * d + j];
  for (auto& v : pd.mean) v /= static_cast<double>(pd.train_idx.size());
  for (int i : pd.train_idx)
    for (int j = 0; j < d; ++j) {
      const double c = X[static_cast<size_t>(i) * d + j] - pd.mean[static_cast<size_t>(j)];
      pd.std[static_cast<size_t>(j)] += c * c;
    }
  for (auto& v : pd.std) v = std::sqrt(v / static_cast<double>(pd.train_idx.size())) + 1e-9;
  return pd;
}

Tensor gather_X(const std::vector<double>& X, int d, const std::vector<int>& idx, const ProbeData& pd) {
  Tensor out({static_cast<int>(idx.size()), d});
  for (size_t r = 0; r < idx.size(); ++r)
    for (int j = 0; j < d; ++j)
      out[r * d + static_cast<size_t>(j)] =
          (X[static_cast<size_t>(idx[r]) * d + j] - pd.mean[static_cast<size_t>(j)]) / pd.std[static_cast<size_t>(j)];
  return out;
}

struct Mlp : Module {
  Param *w1, *b1, *w2, *b2;
  Mlp(int d, int hidden, int out, Rng& rng) {
    w1 = &add_param("w1", Tensor::randn({d, hidden}, rng, std::sqrt(2.0 / d)));
    b1 = &add_param("b1", Tensor({hidden}));
    w2 = &add_param("w2", Tensor::randn({hidden, out}, rng, std::sqrt(1.0 / hidden)));
    b2 = &add_param("b2", Tensor({out}));
  }
  Var forward(Graph& g, Var x) {
    return linear(relu(linear(x, g.use(*w1), g.use(*b1))), g.use(*w2), g.use(*b2));
  }
};

}  // namespace

double probe_classify(const std::vector<double>& X, int n, int d, const std::vector<int>& y,
                      int n_classes, const MlpProbeConfig& cfg) {
  if (static_cast<size_t>(n) * d != X.size() || static_cast<size_t>(n) != y.size())
    throw std::invalid_argument("probe_classify: size mismatch");
  std::vector<int> counts(static_cast<size_t>(n_classes), 0);
  for (int v : y) {
    if (v < 0 || v >= n_classes) throw std::invalid_argument("probe_classify: label out of range");
    ++counts[static_cast<size_t>(v)];
  }
  for (int c = 0; c < n_classes; ++c)
    if (counts[static_cast<size_t>(c)] > 0 && counts[static_cast<size_t>(c)] < 2)
      throw std::invalid_argument("probe_classify: class with fewer than 2 examples");
  Rng rng(cfg.seed);
  const auto pd = probe_split(X, n, d, cfg.train_frac, rng);
  Mlp mlp(d, cfg.hidden, n_classes, rng);
  Adam opt({cfg.lr});
  const Tensor Xtr = gather_X(X, d, pd.train_idx, pd);
  const int ntr = Xtr.dim(0);
  Tensor onehot({ntr, n_classes});
  for (int i = 0; i < ntr; ++i)
    onehot[static_cast<size_t>(i) * n_classes + y[static_cast<size_t>(pd.train_idx[static_cast<size_t>(i)])]] = 1.0;
  for (int e = 0; e < cfg.epochs; ++e) {
    Graph g;
    Var logits = mlp.forward(g, g.constant(Xtr));
    Var ce = mul_scalar(sum_all(sub(lse_rows(logits), row_sum(mul(logits, g.constant(onehot))))),
                        1.0 / ntr);
    opt.zero_grads(mlp.params());
    g.backward(ce);
    g.accumulate_param_grads(mlp.params());
    opt.step(mlp.params());
  }
  // held-out accuracy
  Graph g;
  Graph::NoGrad ng(g);
  const Tensor Xte = gather_X(X, d, pd.test_idx, pd);
  const Tensor& logits = mlp.forward(g, g.constant(Xte)).val();
  int correct = 0;
  for (size_t i = 0; i < pd.test_idx.size(); ++i) {
    int arg = 0;
    for (int c = 1; c < n_classes; ++c)
      if (logits[i * n_classes + static_cast<size_t>(c)] > logits[i * n_classes + static_cast<size_t>(arg)])
        arg = c;
    if (arg == y[static_cast<size_t>(pd.test_idx[i])]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pd.test_idx.size());
}

double probe_regress(const std::vector<double>& X, int n, int d, const std::vector<double>& targets,
                     int m, const MlpProbeConfig& cfg) {
  if (static_cast<size_t>(n) * d != X.size() || static_cast<size_t>(n) * m != targets.size())
    throw std::invalid_argument("probe_regress: size mismatch");
  Rng rng(cfg.seed);
  const auto pd = probe_split(X, n, d, cfg.train_frac, rng);
  Mlp mlp(d, cfg.hidden, m, rng);
  Adam opt({cfg.lr});
  const Tensor Xtr = gather_X(X, d, pd.train_idx, pd);
  Tensor Ttr({static_cast<int>(pd.train_idx.size()), m});
  for (size_t i = 0; i < pd.train_idx.size(); ++i)
    for (int j = 0; j < m; ++j)
      Ttr[i * m + static_cast<size_t>(j)] = targets[static_cast<size_t>(pd.train_idx[i]) * m + j];
  for (int e = 0; e < cfg.epochs; ++e) {
    Graph g;
    Var loss = mse(mlp.forward(g, g.constant(Xtr)), g.constant(Ttr));
    opt.zero_grads(mlp.params());
    g.backward(loss);
    g.accumulate_param_grads(mlp.params());
    opt.step(mlp.params());
  }
  Graph g;
  Graph::NoGrad ng(g);
  const Tensor Xte = gather_X(X, d, pd.test_idx, pd);
  const Tensor& pred = mlp.forward(g, g.constant(Xte)).val();
  double acc = 0;
  for (size_t i = 0; i < pd.test_idx.size(); ++i)
    for (int j = 0; j < m; ++j) {
      const double dv = pred[i * m + static_cast<size_t>(j)] -
                        targets[static_cast<size_t>(pd.test_idx[i]) * m + j];
      acc += dv * dv;
    }
  return acc / (static_cast<double>(pd.test_idx.size()) * m);
}

// ---------------------------------------------------------------------------
// latent-to-region matching
// ---------------------------------------------------------------------------

MatchResult match_latents(const Tensor& z, const Tensor& x01, const std::vector<Tensor>& refs01,
                          const EncodeFn& encode, const DecodeFn& decode) {
  return match_latents_batched(z, x01, refs01, encode, [&](const std::vector<Tensor>& zs) {
    std::vector<Tensor> out;
    out.reserve(zs.size());
    for (const auto& zz : zs) out.push_back(decode(zz));
    return out;
  });
}

MatchResult match_latents_batched(const Tensor& z, const Tensor& x01,
                                  const std::vector<Tensor>& refs01, const EncodeFn& encode,
                                  const BatchDecodeFn& decode_batch) {
  if (refs01.size() < 4) throw std::invalid_argument("match_latents: need at least 4 references");
  const int K = z.dim(0), D = z.dim(1);
  const int H = x01.dim(1), W = x01.dim(2);
  const size_t hw = static_cast<size_t>(H) * W;
  const int B = static_cast<int>(refs01.size());

  std::vector<Tensor> z_ref;
  for (const auto& r : refs01) z_ref.push_back(encode(r));

  Tensor ref_cm({3, H, W});
  for (const auto& r : refs01) ref_cm.axpy_(1.0 / B, r);
  // decode-consistent baseline, used only for the empty-slot flag
  Tensor dec_ref_cm({3, H, W});
  for (const auto& dr : decode_batch(z_ref)) dec_ref_cm.axpy_(1.0 / B, dr);

  std::vector<Tensor> mixed_cm(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) {
    std::vector<Tensor> batch;
    batch.reserve(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      Tensor zm = z_ref[static_cast<size_t>(b)];
      std::copy(z.data() + static_cast<size_t>(i) * D, z.data() + static_cast<size_t>(i + 1) * D,
                zm.data() + static_cast<size_t>(i) * D);
      batch.push_back(std::move(zm));
    }
    Tensor acc({3, H, W});
    for (const auto& img : decode_batch(batch)) acc.axpy_(1.0 / B, img);
    mixed_cm[static_cast<size_t>(i)] = std::move(acc);
  }

  MatchResult res;
  res.h = H;
  res.w = W;
  res.slot_of_pixel.resize(hw);
  res.empty_slot.assign(static_cast<size_t>(K), 0);
  for (int i = 0; i < K; ++i) {
    // replacement that never changes any decode leaves the mixed mean at the
    // decoded-reference mean
    double dev = 0;
    for (size_t p = 0; p < mixed_cm[static_cast<size_t>(i)].numel(); ++p)
      dev = std::max(dev, std::fabs(mixed_cm[static_cast<size_t>(i)][p] - dec_ref_cm[p]));
    res.empty_slot[static_cast<size_t>(i)] = dev < 1e-6 ? 1 : 0;
  }

  // per-pixel channel-mean absolute distances
  std::vector<double> s_pre(static_cast<size_t>(K) * hw), d_pre(static_cast<size_t>(K) * hw);
  for (int i = 0; i < K; ++i)
    for (size_t p = 0; p < hw; ++p) {
      double ds = 0, dd = 0;
      for (int c = 0; c < 3; ++c) {
        ds += std::fabs(x01[static_cast<size_t>(c) * hw + p] -
                        mixed_cm[static_cast<size_t>(i)][static_cast<size_t>(c) * hw + p]);
        dd += std::fabs(mixed_cm[static_cast<size_t>(i)][static_cast<size_t>(c) * hw + p] -
                        ref_cm[static_cast<size_t>(c) * hw + p]);
      }
      s_pre[static_cast<size_t>(i) * hw + p] = 1.0 - ds / 3.0;
      d_pre[static_cast<size_t>(i) * hw + p] = dd / 3.0;
    }
  // softmax over slots per pixel, then argmax of the sum
  for (size_t p = 0; p < hw; ++p) {
    double smax = -1e300, dmax = -1e300;
    for (int i = 0; i < K; ++i) {
      smax = std::max(smax, s_pre[static_cast<size_t>(i) * hw + p]);
      dmax = std::max(dmax, d_pre[static_cast<size_t>(i) * hw + p]);
    }
    double sden = 0, dden = 0;
    for (int i = 0; i < K; ++i) {
      sden += std::exp(s_pre[static_cast<size_t>(i) * hw + p] - smax);
      dden += std::exp(d_pre[static_cast<size_t>(i) * hw + p] - dmax);
    }
    int arg = 0;
    double best = -1e300;
    for (int i = 0; i < K; ++i) {
      const double sv = std::exp(s_pre[static_cast<size_t>(i) * hw + p] - smax) / sden;
      const double dv = std::exp(d_pre[static_cast<size_t>(i) * hw + p] - dmax) / dden;
      if (sv + dv > best) {
        best = sv + dv;
        arg = i;
      }
    }
    res.slot_of_pixel[p] = arg;
  }
  return res;
}

// ---------------------------------------------------------------------------
// spatial broadcast decoder masks
// ---------------------------------------------------------------------------

namespace {

struct SbdNet : Module {
  Param *c0w, *c0b, *c1w, *c1b, *c2w, *c2b, *c3w, *c3b, *rgbw, *rgbb, *aw, *ab;
  int C;
  SbdNet(int in_ch, int channels, Rng& rng) : C(channels) {
    auto init = [&](int co, int ci) {
      return Tensor::randn({co, ci, 3, 3}, rng, std::sqrt(2.0 / (ci * 9)));
    };
    c0w = &add_param("c0.w", init(C, in_ch));
    c0b = &add_param("c0.b", Tensor({C}));
    c1w = &add_param("c1.w", init(C, C));
    c1b = &add_param("c1.b", Tensor({C}));
    c2w = &add_param("c2.w", init(C, C));
    c2b = &add_param("c2.b", Tensor({C}));
    c3w = &add_param("c3.w", init(C, C));
    c3b = &add_param("c3.b", Tensor({C}));
    rgbw = &add_param("rgb.w", init(3, C));
    rgbb = &add_param("rgb.b", Tensor({3}));
    aw = &add_param("a.w", init(1, C));
    ab = &add_param("a.b", Tensor({1}));
  }
  // input (N, D+2, g, g) -> rgb (N,3,4g,4g), alpha (N,1,4g,4g)
  std::pair<Var, Var> forward(Graph& g, Var in) {
    Var h = relu(conv2d(in, g.use(*c0w), g.use(*c0b), 1, 1));
    h = relu(conv2d(h, g.use(*c1w), g.use(*c1b), 1, 1));
    h = relu(conv2d(upsample2x(h), g.use(*c2w), g.use(*c2b), 1, 1));
    h = relu(conv2d(upsample2x(h), g.use(*c3w), g.use(*c3b), 1, 1));
    return {conv2d(h, g.use(*rgbw), g.use(*rgbb), 1, 1), conv2d(h, g.use(*aw), g.use(*ab), 1, 1)};
  }
};

Tensor sbd_input(const std::vector<Tensor>& latent_sets, const std::vector<int>& idx, int slot,
                 int grid) {
  const int D = latent_sets[0].dim(1);
  Tensor in({static_cast<int>(idx.size()), D + 2, grid, grid});
  const size_t g2 = static_cast<size_t>(grid) * grid;
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor& z = latent_sets[static_cast<size_t>(idx[b])];
    for (int c = 0; c < D; ++c) {
      double* p = in.data() + (b * static_cast<size_t>(D + 2) + static_cast<size_t>(c)) * g2;
      const double v = z[static_cast<size_t>(slot) * D + c];
      for (size_t i = 0; i < g2; ++i) p[i] = v;
    }
    double* px = in.data() + (b * static_cast<size_t>(D + 2) + static_cast<size_t>(D)) * g2;
    double* py = in.data() + (b * static_cast<size_t>(D + 2) + static_cast<size_t>(D + 1)) * g2;
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x) {
        px[static_cast<size_t>(y) * grid + x] = grid > 1 ? 2.0 * x / (grid - 1) - 1.0 : 0.0;
        py[static_cast<size_t>(y) * grid + x] = grid > 1 ? 2.0 * y / (grid - 1) - 1.0 : 0.0;
      }
  }
  return in;
}

// (B,K,H,W) alphas -> per-pixel softmax over K
Var softmax_slots(Var alphas) {
  const int H = alphas.val().dim(2), W = alphas.val().dim(3);
  return ntc_to_nchw(softmax_last(nchw_to_ntc(alphas)), H, W);
}

}  // namespace

std::vector<Tensor> sbd_masks(const std::vector<Tensor>& latent_sets,
                              const std::vector<Tensor>& images01, const SbdConfig& cfg) {
  if (latent_sets.empty() || latent_sets.size() != images01.size())
    throw std::invalid_argument("sbd_masks: latents/images mismatch");
  const int K = latent_sets[0].dim(0), D = latent_sets[0].dim(1);
  const int H = images01[0].dim(1), W = images01[0].dim(2);
  if (cfg.broadcast * 4 != H || H != W)
    throw std::invalid_argument("sbd_masks: broadcast grid must be image_size/4");
  const int N = static_cast<int>(latent_sets.size());
  Rng rng(cfg.seed);
  SbdNet net(D + 2, cfg.channels, rng);
  Adam opt({cfg.lr});

  auto forward_batch = [&](Graph& g, const std::vector<int>& idx) {
    std::vector<Var> rgbs, alphas;
    for (int k = 0; k < K; ++k) {
      Var in = g.constant(sbd_input(latent_sets, idx, k, cfg.broadcast));
      auto [rgb, a] = net.forward(g, in);
      rgbs.push_back(rgb);
      alphas.push_back(a);
    }
    Var astack = alphas[0];
    for (int k = 1; k < K; ++k) astack = concat_ch(astack, alphas[static_cast<size_t>(k)]);
    Var soft = softmax_slots(astack);  // (B,K,H,W)
    Var recon;
    for (int k = 0; k < K; ++k) {
      Var term = mul_bc_ch(rgbs[static_cast<size_t>(k)], slice_ch(soft, k, k + 1));
      recon = recon.valid() ? add(recon, term) : term;
    }
    return std::make_pair(recon, soft);
  };

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx(static_cast<size_t>(std::min(cfg.batch, N)));
    for (auto& i : idx) i = static_cast<int>(rng.uniform_u64(static_cast<uint64_t>(N)));
    Tensor target({static_cast<int>(idx.size()), 3, H, W});
    for (size_t b = 0; b < idx.size(); ++b)
      std::copy(images01[static_cast<size_t>(idx[b])].data(),
                images01[static_cast<size_t>(idx[b])].data() + 3 * static_cast<size_t>(H) * W,
                target.data() + b * 3 * static_cast<size_t>(H) * W);
    Graph g;
    auto [recon, soft] = forward_batch(g, idx);
    Var loss = mse(recon, g.constant(target));
    if (!std::isfinite(loss.val()[0]))
      throw std::runtime_error("sbd_masks: reconstruction loss diverged (non-finite)");
    opt.zero_grads(net.params());
    g.backward(loss);
    g.accumulate_param_grads(net.params());
    opt.step(net.params());
  }

  std::vector<Tensor> out;
  for (int i = 0; i < N; ++i) {
    Graph g;
    Graph::NoGrad ng(g);
    auto [recon, soft] = forward_batch(g, {i});
    out.push_back(soft.val().reshaped({K, H, W}));
  }
  return out;
}

}  // namespace compdis::metrics
