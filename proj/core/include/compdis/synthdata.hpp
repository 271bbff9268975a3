#pragma once

#include <array>
#include <string>
#include <vector>

#include "compdis/rng.hpp"
#include "compdis/tensor.hpp"

namespace compdis::data {

// ---- color helpers (h,s,v in [0,1]) ----
std::array<double, 3> hsv_to_rgb(double h, double s, double v);
std::array<double, 3> rgb_to_hsv(double r, double g, double b);

enum class DatasetKind { Attribute, Object, Style };
std::string to_string(DatasetKind k);
DatasetKind kind_from_string(const std::string& s);

struct AttrRecipe {
  // factor order: floor hue, wall hue, object hue, shape (<=3), size (<=4)
  std::vector<int> cardinalities = {4, 4, 4, 3, 3};
  int n = 0;  // 0 = one image per grid tuple; >0 = iid uniform tuples
  uint64_t seed = 0;
};

struct ObjRecipe {
  int min_objects = 2;
  int max_objects = 4;
  int n = 1000;  // scene count
  uint64_t seed = 0;
};

struct StyleRecipe {
  ObjRecipe base;  // every base scene is emitted under all four palette styles
};

struct ObjectRecord {
  int shape = 0;  // 0 circle, 1 square, 2 triangle
  int color = 0;  // palette index
  int size = 0;   // radius = 3 + size
  int cx = 0, cy = 0;
  int mask_index = -1;  // frame index into masks
};

enum class Split : int8_t { Train = 0, Val = 1, Test = 2 };

struct FactorDataset {
  DatasetKind kind = DatasetKind::Attribute;
  int image_size = 32;
  int n = 0;
  std::vector<std::string> factor_names;  // attribute datasets
  std::vector<int> cardinalities;
  std::vector<uint8_t> images;  // n * H * W * 3, HWC u8
  std::vector<int> factors;     // n * F (attribute datasets)
  std::vector<std::vector<ObjectRecord>> objects;  // object/style datasets
  std::vector<uint8_t> masks;                      // mask frames, H*W u8 each
  std::vector<int> style;                          // per-image style id (style datasets)
  std::vector<int> scene_id;                       // per-image base scene (object/style)
  std::vector<int8_t> split;                       // per-image Split tag
  std::string recipe_json;                         // recipe + seed, round-trippable

  int factor_count() const { return static_cast<int>(cardinalities.size()); }
  Tensor image01(int i) const;         // (3,H,W) in [0,1]
  Tensor mask_frame(int m) const;      // (H,W) in {0,1}
  std::vector<int> indices(Split s) const;
  const int* factor_row(int i) const { return factors.data() + static_cast<size_t>(i) * cardinalities.size(); }
};

// pure tuple -> image renderers (images are functions of the factor tuple)
Tensor render_attr_image01(const std::vector<int>& tuple, const AttrRecipe& recipe);
Tensor apply_style01(const Tensor& img01, int style_id);  // global palette transforms 0..3

FactorDataset gen_attr(const AttrRecipe& recipe);
FactorDataset gen_obj(const ObjRecipe& recipe);
FactorDataset gen_style(const StyleRecipe& recipe);

// Gaussian-copula resampling of the factor table so `pairs` designated factor
// pairs reach the requested Pearson correlation; images re-rendered.
FactorDataset apply_correlation(const FactorDataset& ds, int pairs, double sigma);

AttrRecipe attr_recipe_from_json(const std::string& json);

void save_dataset(const std::string& dir, const FactorDataset& ds);
FactorDataset load_dataset(const std::string& dir);

constexpr int kNumStyles = 4;
constexpr int kNumPaletteColors = 6;
constexpr int kNumShapes = 3;

}  // namespace compdis::data
