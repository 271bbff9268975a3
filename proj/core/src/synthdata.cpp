#include "compdis/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "compdis/serialize.hpp"

namespace compdis::data {

using nlohmann::json;
namespace fs = std::filesystem;

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0;
  if (d > 1e-12) {
    if (mx == r) h = std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = (b - r) / d + 2.0;
    else h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0) h += 1.0;
  }
  const double s = mx < 1e-12 ? 0.0 : d / mx;
  return {h, s, mx};
}

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::Attribute: return "attr";
    case DatasetKind::Object: return "obj";
    case DatasetKind::Style: return "style";
  }
  return "?";
}

DatasetKind kind_from_string(const std::string& s) {
  if (s == "attr") return DatasetKind::Attribute;
  if (s == "obj") return DatasetKind::Object;
  if (s == "style") return DatasetKind::Style;
  throw std::invalid_argument("unknown dataset kind: " + s);
}

Tensor FactorDataset::image01(int i) const {
  if (i < 0 || i >= n) throw std::out_of_range("FactorDataset: image index");
  Tensor t({3, image_size, image_size});
  const size_t hw = static_cast<size_t>(image_size) * image_size;
  const uint8_t* src = images.data() + static_cast<size_t>(i) * hw * 3;
  for (size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) t[static_cast<size_t>(c) * hw + p] = src[p * 3 + static_cast<size_t>(c)] / 255.0;
  return t;
}

Tensor FactorDataset::mask_frame(int m) const {
  const size_t hw = static_cast<size_t>(image_size) * image_size;
  if (m < 0 || static_cast<size_t>(m + 1) * hw > masks.size())
    throw std::out_of_range("FactorDataset: mask index");
  Tensor t({image_size, image_size});
  for (size_t p = 0; p < hw; ++p) t[p] = masks[static_cast<size_t>(m) * hw + p] ? 1.0 : 0.0;
  return t;
}

std::vector<int> FactorDataset::indices(Split s) const {
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    if (split[static_cast<size_t>(i)] == static_cast<int8_t>(s)) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// attribute renderer
// ---------------------------------------------------------------------------

namespace {

constexpr int kWallRows = 20;  // rows 0..19 wall, 20..31 floor

struct ShapeRaster {
  // returns true if pixel (x,y) belongs to the shape
  static bool covers(int shape, int cx, int cy, int r, int x, int y) {
    switch (shape) {
      case 0:  // circle
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
      case 1:  // square
        return std::abs(x - cx) <= r && std::abs(y - cy) <= r;
      case 2: {  // upward triangle
        const int dy = y - (cy - r);
        if (dy < 0 || dy > 2 * r) return false;
        return std::abs(x - cx) * 2 <= dy;
      }
      default: throw std::invalid_argument("unknown shape id");
    }
  }
};

void put_px(Tensor& img, int x, int y, const std::array<double, 3>& rgb) {
  const int S = img.dim(1);
  const size_t hw = static_cast<size_t>(S) * S;
  const size_t p = static_cast<size_t>(y) * S + x;
  img[p] = rgb[0];
  img[hw + p] = rgb[1];
  img[2 * hw + p] = rgb[2];
}

void validate_attr_recipe(const AttrRecipe& r) {
  if (r.cardinalities.size() < 2 || r.cardinalities.size() > 5)
    throw std::invalid_argument("gen_attr: need 2..5 factors");
  for (int c : r.cardinalities)
    if (c < 2) throw std::invalid_argument("gen_attr: every cardinality must be >= 2");
  if (r.cardinalities.size() >= 4 && r.cardinalities[3] > kNumShapes)
    throw std::invalid_argument("gen_attr: shape cardinality exceeds available shapes");
  if (r.cardinalities.size() >= 5 && r.cardinalities[4] > 4)
    throw std::invalid_argument("gen_attr: size cardinality overflows the frame");
}

uint64_t mix_hash(uint64_t a, uint64_t b) {
  uint64_t x = a * 0x9e3779b97f4a7c15ULL + b + 0x2545f4914f6cdd1dULL;
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  return x;
}

int8_t split_of_hash(uint64_t h) {
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  if (u < 0.8) return static_cast<int8_t>(Split::Train);
  if (u < 0.9) return static_cast<int8_t>(Split::Val);
  return static_cast<int8_t>(Split::Test);
}

std::string attr_recipe_json(const AttrRecipe& r) {
  json j;
  j["kind"] = "attr";
  j["cardinalities"] = r.cardinalities;
  j["n"] = r.n;
  j["seed"] = r.seed;
  return j.dump();
}

std::string obj_recipe_json(const ObjRecipe& r, bool styled) {
  json j;
  j["kind"] = styled ? "style" : "obj";
  j["min_objects"] = r.min_objects;
  j["max_objects"] = r.max_objects;
  j["n"] = r.n;
  j["seed"] = r.seed;
  return j.dump();
}

void store_image(FactorDataset& ds, int i, const Tensor& img01) {
  const size_t hw = static_cast<size_t>(ds.image_size) * ds.image_size;
  uint8_t* dst = ds.images.data() + static_cast<size_t>(i) * hw * 3;
  for (size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(img01[static_cast<size_t>(c) * hw + p], 0.0, 1.0);
      dst[p * 3 + static_cast<size_t>(c)] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
}

}  // namespace

Tensor render_attr_image01(const std::vector<int>& tuple, const AttrRecipe& recipe) {
  validate_attr_recipe(recipe);
  if (tuple.size() != recipe.cardinalities.size())
    throw std::invalid_argument("render_attr_image01: tuple arity mismatch");
  for (size_t i = 0; i < tuple.size(); ++i)
    if (tuple[i] < 0 || tuple[i] >= recipe.cardinalities[i])
      throw std::invalid_argument("render_attr_image01: factor value out of range");
  const int S = 32;
  auto fv = [&](size_t i, int fallback) { return i < tuple.size() ? tuple[i] : fallback; };
  const double floor_h = static_cast<double>(fv(0, 0)) / recipe.cardinalities[0];
  const double wall_h = static_cast<double>(fv(1, 0)) / recipe.cardinalities[1];
  const double obj_h = tuple.size() > 2 ? static_cast<double>(tuple[2]) / recipe.cardinalities[2] : 0.0;
  const int shape = fv(3, 1);
  const int size_idx = fv(4, 1);
  const int r = 4 + 2 * size_idx;

  const auto wall_rgb = hsv_to_rgb(wall_h, 0.45, 0.75);
  const auto floor_rgb = hsv_to_rgb(floor_h, 0.6, 0.55);
  const auto obj_rgb = hsv_to_rgb(obj_h, 0.9, 0.95);

  Tensor img({3, S, S});
  const int cx = S / 2, cy = S / 2;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      if (ShapeRaster::covers(shape, cx, cy, r, x, y)) put_px(img, x, y, obj_rgb);
      else if (y < kWallRows) put_px(img, x, y, wall_rgb);
      else put_px(img, x, y, floor_rgb);
    }
  return img;
}

FactorDataset gen_attr(const AttrRecipe& recipe) {
  validate_attr_recipe(recipe);
  FactorDataset ds;
  ds.kind = DatasetKind::Attribute;
  ds.cardinalities = recipe.cardinalities;
  static const char* kNames[5] = {"floor_hue", "wall_hue", "object_hue", "shape", "size"};
  for (size_t i = 0; i < recipe.cardinalities.size(); ++i) ds.factor_names.push_back(kNames[i]);
  ds.recipe_json = attr_recipe_json(recipe);

  const int F = ds.factor_count();
  std::vector<std::vector<int>> tuples;
  if (recipe.n == 0) {
    std::vector<int> cur(static_cast<size_t>(F), 0);
    while (true) {
      tuples.push_back(cur);
      int i = F - 1;
      for (; i >= 0; --i) {
        if (++cur[static_cast<size_t>(i)] < recipe.cardinalities[static_cast<size_t>(i)]) break;
        cur[static_cast<size_t>(i)] = 0;
      }
      if (i < 0) break;
    }
  } else {
    Rng rng(recipe.seed);
    for (int k = 0; k < recipe.n; ++k) {
      std::vector<int> t(static_cast<size_t>(F));
      for (int f = 0; f < F; ++f)
        t[static_cast<size_t>(f)] = rng.uniform_int(0, recipe.cardinalities[static_cast<size_t>(f)] - 1);
      tuples.push_back(std::move(t));
    }
  }

  ds.n = static_cast<int>(tuples.size());
  ds.images.resize(static_cast<size_t>(ds.n) * ds.image_size * ds.image_size * 3);
  ds.factors.resize(static_cast<size_t>(ds.n) * F);
  ds.split.resize(static_cast<size_t>(ds.n));
  for (int i = 0; i < ds.n; ++i) {
    const auto& t = tuples[static_cast<size_t>(i)];
    store_image(ds, i, render_attr_image01(t, recipe));
    for (int f = 0; f < F; ++f) ds.factors[static_cast<size_t>(i) * F + f] = t[static_cast<size_t>(f)];
    // split by tuple so no tuple crosses splits even with repeats
    uint64_t h = recipe.seed ^ 0xa5a5a5a5ULL;
    for (int f = 0; f < F; ++f) h = mix_hash(h, static_cast<uint64_t>(t[static_cast<size_t>(f)]) + 1);
    ds.split[static_cast<size_t>(i)] = split_of_hash(h);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// object / style datasets
// ---------------------------------------------------------------------------

namespace {

constexpr double kBgRgb[3] = {30.0 / 255.0, 30.0 / 255.0, 36.0 / 255.0};

Tensor render_scene01(const std::vector<ObjectRecord>& objs, int S) {
  Tensor img({3, S, S});
  const size_t hw = static_cast<size_t>(S) * S;
  for (size_t p = 0; p < hw; ++p) {
    img[p] = kBgRgb[0];
    img[hw + p] = kBgRgb[1];
    img[2 * hw + p] = kBgRgb[2];
  }
  for (const auto& o : objs) {
    const double hue = static_cast<double>(o.color) / kNumPaletteColors;
    const auto rgb = hsv_to_rgb(hue, 0.85, 0.95);
    const int r = 3 + o.size;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (ShapeRaster::covers(o.shape, o.cx, o.cy, r, x, y)) put_px(img, x, y, rgb);
  }
  return img;
}

std::vector<uint8_t> rasterize_mask(const ObjectRecord& o, int S) {
  std::vector<uint8_t> m(static_cast<size_t>(S) * S, 0);
  const int r = 3 + o.size;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      if (ShapeRaster::covers(o.shape, o.cx, o.cy, r, x, y)) m[static_cast<size_t>(y) * S + x] = 1;
  return m;
}

std::vector<ObjectRecord> sample_scene(const ObjRecipe& recipe, int S, Rng& rng) {
  if (recipe.min_objects < 1 || recipe.max_objects < recipe.min_objects)
    throw std::invalid_argument("gen_obj: bad object count range");
  // the object count is drawn once and kept across scene retries, so
  // placement failures cannot bias the count distribution
  const int count = rng.uniform_int(recipe.min_objects, recipe.max_objects);
  for (int scene_try = 0; scene_try < 10000; ++scene_try) {
    std::vector<ObjectRecord> objs;
    bool scene_ok = true;
    for (int k = 0; k < count && scene_ok; ++k) {
      ObjectRecord o;
      o.shape = rng.uniform_int(0, kNumShapes - 1);
      o.color = rng.uniform_int(0, kNumPaletteColors - 1);
      o.size = rng.uniform_int(0, 2);
      const int r = 3 + o.size;
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        o.cx = rng.uniform_int(r + 1, S - r - 2);
        o.cy = rng.uniform_int(r + 1, S - r - 2);
        placed = true;
        for (const auto& prev : objs) {
          const int pr = 3 + prev.size;
          const int d = std::max(std::abs(o.cx - prev.cx), std::abs(o.cy - prev.cy));
          if (d < r + pr + 3) {  // keeps >= 2px gap between masks
            placed = false;
            break;
          }
        }
      }
      if (!placed) scene_ok = false;  // resample the whole scene at this count
      else objs.push_back(o);
    }
    if (scene_ok) return objs;
  }
  throw std::runtime_error("gen_obj: scene placement failed; recipe too crowded for the frame");
}

void append_scene(FactorDataset& ds, int image_idx, int scene, int style_id,
                  std::vector<ObjectRecord> objs, const Tensor& img01) {
  store_image(ds, image_idx, img01);
  const int S = ds.image_size;
  for (auto& o : objs) {
    o.mask_index = static_cast<int>(ds.masks.size() / (static_cast<size_t>(S) * S));
    auto m = rasterize_mask(o, S);
    ds.masks.insert(ds.masks.end(), m.begin(), m.end());
  }
  ds.objects[static_cast<size_t>(image_idx)] = std::move(objs);
  ds.scene_id[static_cast<size_t>(image_idx)] = scene;
  if (!ds.style.empty()) ds.style[static_cast<size_t>(image_idx)] = style_id;
}

}  // namespace

FactorDataset gen_obj(const ObjRecipe& recipe) {
  FactorDataset ds;
  ds.kind = DatasetKind::Object;
  ds.recipe_json = obj_recipe_json(recipe, false);
  ds.n = recipe.n;
  ds.images.resize(static_cast<size_t>(ds.n) * ds.image_size * ds.image_size * 3);
  ds.objects.resize(static_cast<size_t>(ds.n));
  ds.scene_id.resize(static_cast<size_t>(ds.n));
  ds.split.resize(static_cast<size_t>(ds.n));
  Rng rng(recipe.seed);
  for (int i = 0; i < ds.n; ++i) {
    auto objs = sample_scene(recipe, ds.image_size, rng);
    const Tensor img = render_scene01(objs, ds.image_size);
    append_scene(ds, i, i, 0, std::move(objs), img);
    ds.split[static_cast<size_t>(i)] = split_of_hash(mix_hash(recipe.seed, static_cast<uint64_t>(i)));
  }
  return ds;
}

Tensor apply_style01(const Tensor& img01, int style_id) {
  if (img01.rank() != 3 || img01.dim(0) != 3) throw std::invalid_argument("apply_style01: need (3,H,W)");
  const size_t hw = static_cast<size_t>(img01.dim(1)) * img01.dim(2);
  Tensor out = img01;
  auto for_px = [&](auto&& fn) {
    for (size_t p = 0; p < hw; ++p) {
      std::array<double, 3> rgb = {out[p], out[hw + p], out[2 * hw + p]};
      rgb = fn(rgb);
      out[p] = std::clamp(rgb[0], 0.0, 1.0);
      out[hw + p] = std::clamp(rgb[1], 0.0, 1.0);
      out[2 * hw + p] = std::clamp(rgb[2], 0.0, 1.0);
    }
  };
  switch (style_id) {
    case 0:
      break;
    case 1:  // hue rotation + saturation/value boost; 0.13 keeps the rotated
             // palette off the base palette (1/3 would alias a 6-hue wheel)
      for_px([](std::array<double, 3> rgb) {
        auto hsv = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
        return hsv_to_rgb(hsv[0] + 0.13, std::min(1.0, hsv[1] * 1.6), std::min(1.0, hsv[2] * 1.35));
      });
      break;
    case 2:  // desaturated, low contrast
      for_px([](std::array<double, 3> rgb) {
        auto hsv = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
        const double v = 0.5 + 0.45 * (hsv[2] - 0.5);
        return hsv_to_rgb(hsv[0], hsv[1] * 0.25, v);
      });
      break;
    case 3:  // posterized, high contrast
      for_px([](std::array<double, 3> rgb) {
        for (auto& c : rgb) {
          c = std::round(c * 3.0) / 3.0;
          c = 0.5 + 1.5 * (c - 0.5);
        }
        return rgb;
      });
      break;
    default:
      throw std::invalid_argument("apply_style01: style id out of range");
  }
  return out;
}

FactorDataset gen_style(const StyleRecipe& recipe) {
  FactorDataset ds;
  ds.kind = DatasetKind::Style;
  ds.recipe_json = obj_recipe_json(recipe.base, true);
  const int scenes = recipe.base.n;
  ds.n = scenes * kNumStyles;
  ds.images.resize(static_cast<size_t>(ds.n) * ds.image_size * ds.image_size * 3);
  ds.objects.resize(static_cast<size_t>(ds.n));
  ds.scene_id.resize(static_cast<size_t>(ds.n));
  ds.style.resize(static_cast<size_t>(ds.n));
  ds.split.resize(static_cast<size_t>(ds.n));
  Rng rng(recipe.base.seed);
  for (int sc = 0; sc < scenes; ++sc) {
    auto objs = sample_scene(recipe.base, ds.image_size, rng);
    const Tensor base = render_scene01(objs, ds.image_size);
    const int8_t sp = split_of_hash(mix_hash(recipe.base.seed, static_cast<uint64_t>(sc)));
    for (int st = 0; st < kNumStyles; ++st) {
      const int i = sc * kNumStyles + st;
      append_scene(ds, i, sc, st, objs, apply_style01(base, st));
      ds.split[static_cast<size_t>(i)] = sp;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// correlated factor tables
// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<int, int>> correlation_pairs(int pairs, int F) {
  if (pairs < 1 || pairs > 3) throw std::invalid_argument("apply_correlation: pairs must be 1..3");
  if (F < 2) throw std::invalid_argument("apply_correlation: need >= 2 factors");
  std::vector<std::pair<int, int>> out;
  const std::pair<int, int> cands[3] = {{0, 1}, {2, 3}, {1, 2}};
  for (int i = 0; i < pairs; ++i) {
    auto [a, b] = cands[i];
    if (b >= F) throw std::invalid_argument("apply_correlation: not enough factors for pair count");
    out.emplace_back(a, b);
  }
  return out;
}

// discretize a standard normal into `card` equiprobable bins
int bin_of(double g, int card) {
  // inverse-free: compare against the normal CDF via erf
  const double u = 0.5 * (1.0 + std::erf(g / std::sqrt(2.0)));
  int b = static_cast<int>(u * card);
  return std::clamp(b, 0, card - 1);
}

double measure_pair_corr(const std::vector<int>& table, int F, int n, int fa, int fb) {
  double ma = 0, mb = 0;
  for (int i = 0; i < n; ++i) {
    ma += table[static_cast<size_t>(i) * F + fa];
    mb += table[static_cast<size_t>(i) * F + fb];
  }
  ma /= n;
  mb /= n;
  double sa = 0, sb = 0, sab = 0;
  for (int i = 0; i < n; ++i) {
    const double da = table[static_cast<size_t>(i) * F + fa] - ma;
    const double db = table[static_cast<size_t>(i) * F + fb] - mb;
    sa += da * da;
    sb += db * db;
    sab += da * db;
  }
  if (sa <= 0 || sb <= 0) return 0.0;
  return sab / std::sqrt(sa * sb);
}

std::vector<int> sample_copula_table(const std::vector<int>& cards,
                                     const std::vector<std::pair<int, int>>& pairs, double latent_rho,
                                     int n, Rng& rng) {
  const int F = static_cast<int>(cards.size());
  std::vector<int> table(static_cast<size_t>(n) * F);
  std::vector<double> gvec(static_cast<size_t>(F));
  for (int i = 0; i < n; ++i) {
    for (int f = 0; f < F; ++f) gvec[static_cast<size_t>(f)] = rng.normal();
    // impose pair correlations: g_b <- rho*g_a + sqrt(1-rho^2)*g_b, applied in order
    for (const auto& [a, b] : pairs)
      gvec[static_cast<size_t>(b)] = latent_rho * gvec[static_cast<size_t>(a)] +
                                     std::sqrt(1.0 - latent_rho * latent_rho) * gvec[static_cast<size_t>(b)];
    for (int f = 0; f < F; ++f)
      table[static_cast<size_t>(i) * F + f] = bin_of(gvec[static_cast<size_t>(f)], cards[static_cast<size_t>(f)]);
  }
  return table;
}

}  // namespace

FactorDataset apply_correlation(const FactorDataset& ds, int pairs, double sigma) {
  if (ds.kind != DatasetKind::Attribute)
    throw std::invalid_argument("apply_correlation: attribute datasets only");
  if (sigma < 0 || sigma > 0.8) throw std::invalid_argument("apply_correlation: sigma out of range");
  const int F = ds.factor_count();
  const auto prs = correlation_pairs(pairs, F);
  for (auto [a, b] : prs)
    if (ds.cardinalities[static_cast<size_t>(a)] < 2 || ds.cardinalities[static_cast<size_t>(b)] < 2)
      throw std::invalid_argument("apply_correlation: infeasible for cardinality < 2");

  const AttrRecipe recipe = attr_recipe_from_json(ds.recipe_json);
  Rng rng(recipe.seed ^ 0xc0ffeeULL);

  // calibrate the latent correlation so the discrete Pearson correlation of
  // the first pair hits sigma (discretization attenuates it)
  double latent = sigma;
  if (sigma > 0) {
    double lo = sigma, hi = std::min(0.99, sigma * 3.0 + 0.05);
    for (int it = 0; it < 18; ++it) {
      const double mid = 0.5 * (lo + hi);
      Rng probe(recipe.seed ^ 0xabcdefULL);
      auto t = sample_copula_table(ds.cardinalities, prs, mid, 20000, probe);
      const double m = measure_pair_corr(t, F, 20000, prs[0].first, prs[0].second);
      if (m < sigma) lo = mid;
      else hi = mid;
    }
    latent = 0.5 * (lo + hi);
  }

  FactorDataset out = ds;
  out.factors = sample_copula_table(ds.cardinalities, prs, latent, ds.n, rng);
  for (int i = 0; i < ds.n; ++i) {
    std::vector<int> tuple(out.factor_row(i), out.factor_row(i) + F);
    store_image(out, i, render_attr_image01(tuple, recipe));
    uint64_t h = recipe.seed ^ 0xa5a5a5a5ULL;
    for (int f = 0; f < F; ++f) h = mix_hash(h, static_cast<uint64_t>(tuple[static_cast<size_t>(f)]) + 1);
    out.split[static_cast<size_t>(i)] = split_of_hash(h);
  }
  json rj = json::parse(out.recipe_json);
  rj["correlate_pairs"] = pairs;
  rj["correlate_sigma"] = sigma;
  out.recipe_json = rj.dump();
  return out;
}

AttrRecipe attr_recipe_from_json(const std::string& text) {
  json j = json::parse(text);
  AttrRecipe r;
  r.cardinalities = j.at("cardinalities").get<std::vector<int>>();
  r.n = j.value("n", 0);
  r.seed = j.value("seed", 0ULL);
  return r;
}

// ---------------------------------------------------------------------------
// on-disk container
// ---------------------------------------------------------------------------

void save_dataset(const std::string& dir, const FactorDataset& ds) {
  fs::create_directories(dir);
  json header;
  header["kind"] = to_string(ds.kind);
  header["image_size"] = ds.image_size;
  header["n"] = ds.n;
  header["recipe"] = json::parse(ds.recipe_json);
  header["factor_schema"] = {{"names", ds.factor_names}, {"cardinalities", ds.cardinalities}};
  header["mask_frames"] =
      static_cast<int>(ds.masks.size() / (static_cast<size_t>(ds.image_size) * ds.image_size));
  header["split"] = ds.split;
  write_file_atomic(dir + "/header.json", header.dump(2));
  write_file_atomic(dir + "/images.bin",
                    std::string(reinterpret_cast<const char*>(ds.images.data()), ds.images.size()));
  if (ds.kind == DatasetKind::Attribute) {
    json rows = json::array();
    for (int i = 0; i < ds.n; ++i)
      rows.push_back(std::vector<int>(ds.factor_row(i), ds.factor_row(i) + ds.factor_count()));
    write_file_atomic(dir + "/factors.json", rows.dump());
  } else {
    json rows = json::array();
    for (int i = 0; i < ds.n; ++i) {
      json img = json::array();
      for (const auto& o : ds.objects[static_cast<size_t>(i)])
        img.push_back({{"shape", o.shape}, {"color", o.color}, {"size", o.size}, {"cx", o.cx},
                       {"cy", o.cy}, {"mask_index", o.mask_index}});
      rows.push_back({{"scene_id", ds.scene_id[static_cast<size_t>(i)]},
                      {"style", ds.style.empty() ? 0 : ds.style[static_cast<size_t>(i)]},
                      {"objects", img}});
    }
    write_file_atomic(dir + "/objects.json", rows.dump());
    write_file_atomic(dir + "/masks.bin",
                      std::string(reinterpret_cast<const char*>(ds.masks.data()), ds.masks.size()));
  }
}

FactorDataset load_dataset(const std::string& dir) {
  FactorDataset ds;
  const json header = json::parse(read_file(dir + "/header.json"));
  ds.kind = kind_from_string(header.at("kind").get<std::string>());
  ds.image_size = header.at("image_size").get<int>();
  ds.n = header.at("n").get<int>();
  ds.recipe_json = header.at("recipe").dump();
  ds.factor_names = header.at("factor_schema").at("names").get<std::vector<std::string>>();
  ds.cardinalities = header.at("factor_schema").at("cardinalities").get<std::vector<int>>();
  ds.split = header.at("split").get<std::vector<int8_t>>();
  const std::string img = read_file(dir + "/images.bin");
  ds.images.assign(img.begin(), img.end());
  const size_t want = static_cast<size_t>(ds.n) * ds.image_size * ds.image_size * 3;
  if (ds.images.size() != want) throw std::runtime_error("load_dataset: images.bin size mismatch");
  if (ds.kind == DatasetKind::Attribute) {
    const json rows = json::parse(read_file(dir + "/factors.json"));
    for (const auto& row : rows)
      for (const auto& v : row) ds.factors.push_back(v.get<int>());
  } else {
    const json rows = json::parse(read_file(dir + "/objects.json"));
    ds.objects.resize(static_cast<size_t>(ds.n));
    ds.scene_id.resize(static_cast<size_t>(ds.n));
    if (ds.kind == DatasetKind::Style) ds.style.resize(static_cast<size_t>(ds.n));
    int i = 0;
    for (const auto& row : rows) {
      ds.scene_id[static_cast<size_t>(i)] = row.at("scene_id").get<int>();
      if (ds.kind == DatasetKind::Style) ds.style[static_cast<size_t>(i)] = row.at("style").get<int>();
      for (const auto& jo : row.at("objects")) {
        ObjectRecord o;
        o.shape = jo.at("shape").get<int>();
        o.color = jo.at("color").get<int>();
        o.size = jo.at("size").get<int>();
        o.cx = jo.at("cx").get<int>();
        o.cy = jo.at("cy").get<int>();
        o.mask_index = jo.at("mask_index").get<int>();
        ds.objects[static_cast<size_t>(i)].push_back(o);
      }
      ++i;
    }
    const std::string mk = read_file(dir + "/masks.bin");
    ds.masks.assign(mk.begin(), mk.end());
  }
  return ds;
}

}  // namespace compdis::data
