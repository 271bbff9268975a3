#pragma once

#include <functional>
#include <string>
#include <vector>

#include "compdis/forest.hpp"
#include "compdis/layout.hpp"
#include "compdis/synthdata.hpp"
#include "compdis/tensor.hpp"

namespace compdis::metrics {

// image (3,H,W) in [0,1] -> representation vector
using RepFn = std::function<std::vector<double>(const Tensor&)>;
// image -> latent set (K,D)
using EncodeFn = std::function<Tensor(const Tensor&)>;
// latent set (K,D) -> image (3,H,W) in [0,1]
using DecodeFn = std::function<Tensor(const Tensor&)>;

// ---------------------------------------------------------------------------
// disentanglement scores
// ---------------------------------------------------------------------------

struct FactorVaeConfig {
  int votes = 800;
  int batch = 64;
  int global_sample = 512;  // images used to estimate per-coordinate std
  uint64_t seed = 0;
};

// Fixed-factor variance voting; majority classifier accuracy on the held-out
// half of votes. Coordinates with zero global variance are excluded.
double factorvae_score(const RepFn& rep, const data::FactorDataset& ds, const FactorVaeConfig& cfg);

struct ImportanceMatrix {
  Tensor R;  // (d latent dims, M factors), non-negative
  std::string provenance;
};

double dci_disentanglement(const ImportanceMatrix& im);

struct ProbeConfig {
  enum class Kind { Trees, L1Linear };
  Kind kind = Kind::Trees;
  ForestConfig forest;
  double l1 = 0.01;
  uint64_t seed = 0;
};

// latents: N x d row-major; factors: N x M integer table.
ImportanceMatrix importance_matrix(const std::vector<double>& latents, int n, int d,
                                   const std::vector<int>& factors, const std::vector<int>& cards,
                                   const ProbeConfig& cfg);

// ---------------------------------------------------------------------------
// per-slot PCA post-processing
// ---------------------------------------------------------------------------

struct PcaModel {
  int K = 0, D = 0, comps = 0;
  std::vector<Tensor> mean;   // K of (D)
  std::vector<Tensor> basis;  // K of (D, comps), columns = components
  std::vector<double> explained_fraction;  // per slot, top-comps eigenvalue share
  std::vector<double> project(const Tensor& latent_set) const;  // (K,D) -> K*comps
};

PcaModel fit_pca(const std::vector<Tensor>& latent_sets, int comps);

// ---------------------------------------------------------------------------
// segmentation agreement
// ---------------------------------------------------------------------------

struct SegmentationEval {
  std::vector<int> pred;   // per-pixel predicted instance labels
  std::vector<int> gt;     // per-pixel ground-truth labels; 0 = background
  std::vector<uint8_t> fg; // foreground mask
  int h = 0, w = 0;

  void validate() const;
};

double fg_ari(const SegmentationEval& ev);
// mIoU aligns gt and predicted label sets with a minimum-cost assignment and
// averages IoU over the gt labels present; mBO takes, per gt instance
// (label > 0), the best-overlap prediction with no one-to-one constraint.
double miou(const SegmentationEval& ev);
double mbo(const SegmentationEval& ev);

// ---------------------------------------------------------------------------
// style discrepancy
// ---------------------------------------------------------------------------

// Fixed-seed random 3-layer conv pyramid; loss is the summed squared
// Frobenius distance between layer Gram matrices.
class GramExtractor {
 public:
  explicit GramExtractor(uint64_t seed = 17);
  double loss(const Tensor& x01, const Tensor& y01) const;
  std::vector<Tensor> grams(const Tensor& img01) const;

 private:
  Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

// Nearest-centroid classifier over global palette statistics; the evaluation
// oracle for style ids.
class StyleOracle {
 public:
  void fit(const data::FactorDataset& ds, data::Split split = data::Split::Train);
  int predict(const Tensor& img01) const;
  double accuracy(const data::FactorDataset& ds, data::Split split) const;
  static std::vector<double> features(const Tensor& img01);

 private:
  std::vector<std::vector<double>> centroids_;
  std::vector<double> feat_mean_, feat_std_;
};

// ---------------------------------------------------------------------------
// probes
// ---------------------------------------------------------------------------

struct MlpProbeConfig {
  int hidden = 256;
  int epochs = 300;
  double lr = 1e-3;
  double train_frac = 0.8;
  uint64_t seed = 0;
};

double probe_classify(const std::vector<double>& X, int n, int d, const std::vector<int>& y,
                      int n_classes, const MlpProbeConfig& cfg);  // held-out accuracy
double probe_regress(const std::vector<double>& X, int n, int d, const std::vector<double>& targets,
                     int m, const MlpProbeConfig& cfg);  // held-out MSE

// ---------------------------------------------------------------------------
// latent-to-region matching and SBD masks
// ---------------------------------------------------------------------------

struct MatchResult {
  int h = 0, w = 0;
  std::vector<int> slot_of_pixel;   // argmax slot per pixel (partition)
  std::vector<uint8_t> empty_slot;  // per-slot flag: replacement never changes decodes
};

// Per-slot region matching: replace slot i of every reference latent set with
// z_i, decode, average, then combine pixel-space closeness to x with
// deviation from the reference mean; argmax over slots per pixel.
MatchResult match_latents(const Tensor& z, const Tensor& x01, const std::vector<Tensor>& refs01,
                          const EncodeFn& encode, const DecodeFn& decode);

// Same procedure with the reference decodes issued as one batch per slot.
using BatchDecodeFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;
MatchResult match_latents_batched(const Tensor& z, const Tensor& x01,
                                  const std::vector<Tensor>& refs01, const EncodeFn& encode,
                                  const BatchDecodeFn& decode_batch);

struct SbdConfig {
  int steps = 1500;
  int batch = 16;
  double lr = 1e-3;
  int channels = 32;
  int broadcast = 8;  // latent broadcast grid; two upsamples reach 4x
  uint64_t seed = 0;
};

// Trains a broadcast decoder (RGB+alpha per slot, softmax-normalized alphas)
// on frozen latents with a reconstruction loss; returns per-image (K,H,W)
// soft masks. Throws std::runtime_error if the loss turns non-finite.
std::vector<Tensor> sbd_masks(const std::vector<Tensor>& latent_sets,
                              const std::vector<Tensor>& images01, const SbdConfig& cfg);

}  // namespace compdis::metrics
