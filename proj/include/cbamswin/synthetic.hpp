#pragma once

// Procedural rail-surface images with exactly known defect boxes.
//
// Background: a bright vertical band (the rail head) over a darker field, plus
// Gaussian noise. Defect kinds:
//   scratch-line   thin bright diagonal stroke
//   dark-blob      dark filled ellipse (squat-like)
//   joint-gap-bar  dark horizontal bar across the rail
//   texture-patch  rust-tinted checker texture
// "Small" instances have area below 2% of the image, "regular" ones at or above.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbamswin/dataset.hpp"
#include "cbamswin/rng.hpp"
#include "cbamswin/stats.hpp"

namespace cbamswin {

enum class DefectKind { ScratchLine, DarkBlob, JointGapBar, TexturePatch };

inline const std::vector<std::string>& defect_kind_names() {
  static const std::vector<std::string> names{"scratch-line", "dark-blob", "joint-gap-bar", "texture-patch"};
  return names;
}

inline DefectKind defect_kind_from_string(const std::string& s) {
  const auto& n = defect_kind_names();
  for (std::size_t i = 0; i < n.size(); ++i)
    if (n[i] == s) return static_cast<DefectKind>(i);
  throw InvalidParam("unknown defect kind '" + s + "'");
}

struct SyntheticSpec {
  std::size_t width = 32, height = 32;
  std::size_t num_images = 64;
  std::vector<DefectKind> kinds{DefectKind::ScratchLine, DefectKind::DarkBlob, DefectKind::JointGapBar,
                                DefectKind::TexturePatch};
  std::size_t min_instances = 1, max_instances = 3;
  double small_fraction = 0.25;
  double noise = 0.03;  // noise std as a fraction of full scale
  bool single_kind = true;  // all instances of an image share one kind (its class label)
  std::uint64_t seed = 0;

  void validate() const {
    if (width < 16 || height < 16) throw InvalidParam("synthetic images must be at least 16x16");
    if (num_images == 0) throw InvalidParam("synthetic set needs at least one image");
    if (kinds.empty()) throw InvalidParam("synthetic set needs at least one defect kind");
    if (min_instances == 0 || min_instances > max_instances) throw InvalidParam("instance range must be 1 <= min <= max");
    if (!(small_fraction >= 0 && small_fraction <= 1)) throw InvalidParam("small_fraction must lie in [0, 1]");
    if (!(noise >= 0 && noise <= 0.5)) throw InvalidParam("noise must lie in [0, 0.5]");
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  std::vector<std::string> kinds;
  for (auto k : s.kinds) kinds.push_back(defect_kind_names()[static_cast<std::size_t>(k)]);
  return {{"width", s.width},          {"height", s.height},
          {"num_images", s.num_images}, {"kinds", kinds},
          {"min_instances", s.min_instances}, {"max_instances", s.max_instances},
          {"small_fraction", s.small_fraction}, {"noise", s.noise},
          {"single_kind", s.single_kind}, {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  for (const auto& [k, v] : j.items()) {
    if (k == "width") s.width = v.get<std::size_t>();
    else if (k == "height") s.height = v.get<std::size_t>();
    else if (k == "num_images") s.num_images = v.get<std::size_t>();
    else if (k == "min_instances") s.min_instances = v.get<std::size_t>();
    else if (k == "max_instances") s.max_instances = v.get<std::size_t>();
    else if (k == "small_fraction") s.small_fraction = v.get<double>();
    else if (k == "noise") s.noise = v.get<double>();
    else if (k == "single_kind") s.single_kind = v.get<bool>();
    else if (k == "seed") s.seed = v.get<std::uint64_t>();
    else if (k == "kinds") {
      s.kinds.clear();
      for (const auto& name : v) s.kinds.push_back(defect_kind_from_string(name.get<std::string>()));
    } else {
      throw ParseError("unknown synthetic key '" + k + "'");
    }
  }
  s.validate();
  return s;
}

namespace detail {

struct Canvas {
  std::size_t W, H;
  std::vector<double> v;  // [H][W][3]
  double& at(std::size_t x, std::size_t y, std::size_t c) { return v[(y * W + x) * 3 + c]; }
  void scale_px(std::size_t x, std::size_t y, double f) {
    for (std::size_t c = 0; c < 3; ++c) at(x, y, c) *= f;
  }
  void set_px(std::size_t x, std::size_t y, double val) {
    for (std::size_t c = 0; c < 3; ++c) at(x, y, c) = val;
  }
};

inline std::size_t rand_range(Rng& rng, double lo, double hi) {
  const auto a = static_cast<std::int64_t>(std::ceil(lo));
  const auto b = std::max(a, static_cast<std::int64_t>(std::floor(hi)));
  return static_cast<std::size_t>(rng.integer(a, b));
}

/// Box extents for a kind; small boxes stay strictly under the area limit.
inline std::pair<std::size_t, std::size_t> defect_extent(DefectKind kind, bool small, std::size_t W, std::size_t H,
                                                         Rng& rng) {
  const double S = static_cast<double>(std::min(W, H));
  const double limit = kSmallRatioThreshold * static_cast<double>(W * H);
  std::size_t w, h;
  if (!small) {
    switch (kind) {
      case DefectKind::ScratchLine: w = rand_range(rng, 0.25 * S, 0.5 * S), h = rand_range(rng, 0.25 * S, 0.5 * S); break;
      case DefectKind::DarkBlob: w = rand_range(rng, 0.2 * S, 0.4 * S), h = rand_range(rng, 0.2 * S, 0.4 * S); break;
      case DefectKind::JointGapBar:
        w = rand_range(rng, 0.5 * S, 0.9 * static_cast<double>(W)), h = rand_range(rng, 0.07 * S, 0.12 * S);
        break;
      case DefectKind::TexturePatch: w = h = rand_range(rng, 0.2 * S, 0.4 * S); break;
    }
    while (static_cast<double>(w * h) < limit) ++w;
    return {std::min(w, W), h};
  }
  const double side = std::sqrt(limit);
  switch (kind) {
    case DefectKind::JointGapBar:
      h = 2;
      w = rand_range(rng, 0.4 * limit / 2, 0.95 * limit / 2);
      break;
    case DefectKind::TexturePatch: w = h = rand_range(rng, 0.6 * side, 0.95 * side); break;
    default:
      w = rand_range(rng, 2, 0.95 * side);
      h = rand_range(rng, 2, 0.95 * side);
      break;
  }
  w = std::max<std::size_t>(w, 2);
  h = std::max<std::size_t>(h, 2);
  while (static_cast<double>(w * h) >= limit) (w >= h ? w : h) -= 1;
  return {w, h};
}

inline void draw_defect(Canvas& cv, DefectKind kind, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h,
                        Rng& rng) {
  switch (kind) {
    case DefectKind::ScratchLine: {
      const bool falling = rng.below(2) == 0;
      const std::size_t steps = 4 * std::max(w, h);
      for (std::size_t s = 0; s <= steps; ++s) {
        const double t = static_cast<double>(s) / static_cast<double>(steps);
        const auto x = x0 + std::min(w - 1, static_cast<std::size_t>(t * static_cast<double>(w)));
        const auto yy = std::min(h - 1, static_cast<std::size_t>(t * static_cast<double>(h)));
        const auto y = y0 + (falling ? yy : h - 1 - yy);
        cv.set_px(x, y, 250.0);
      }
      break;
    }
    case DefectKind::DarkBlob: {
      const double cx = static_cast<double>(w) / 2, cy = static_cast<double>(h) / 2;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dx = (static_cast<double>(x) + 0.5 - cx) / cx, dy = (static_cast<double>(y) + 0.5 - cy) / cy;
          if (dx * dx + dy * dy <= 1.0 || w <= 2 || h <= 2) cv.scale_px(x0 + x, y0 + y, 0.3);
        }
      break;
    }
    case DefectKind::JointGapBar:
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) cv.set_px(x0 + x, y0 + y, 20.0);
      break;
    case DefectKind::TexturePatch:
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double d = (x + y) % 2 ? 55.0 : -55.0;
          cv.at(x0 + x, y0 + y, 0) += d + 35.0;
          cv.at(x0 + x, y0 + y, 1) += d;
          cv.at(x0 + x, y0 + y, 2) += d - 35.0;
        }
      break;
  }
}

}  // namespace detail

/// Category ids are 1-based positions in spec.kinds.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset ds;
  for (std::size_t k = 0; k < spec.kinds.size(); ++k) {
    ds.categories.push_back({static_cast<std::int64_t>(k + 1), defect_kind_names()[static_cast<std::size_t>(spec.kinds[k])]});
  }
  const std::size_t W = spec.width, H = spec.height;
  for (std::size_t n = 0; n < spec.num_images; ++n) {
    detail::Canvas cv{W, H, std::vector<double>(W * H * 3)};
    const double rail_centre = static_cast<double>(W) * rng.uniform(0.4, 0.6);
    const double rail_half = static_cast<double>(W) * rng.uniform(0.25, 0.35);
    const double base = rng.uniform(80, 110);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double d = (static_cast<double>(x) + 0.5 - rail_centre) / rail_half;
        const double v = base + 100.0 * std::exp(-d * d) + 6.0 * static_cast<double>(y) / static_cast<double>(H);
        cv.set_px(x, y, v);
      }
    AnnotatedImage img;
    img.id = static_cast<std::int64_t>(n + 1);
    img.width = W;
    img.height = H;
    img.file_name = "synthetic_" + std::to_string(n + 1) + ".ppm";
    const std::size_t label = rng.below(spec.kinds.size());
    const auto count = rng.integer(static_cast<std::int64_t>(spec.min_instances), static_cast<std::int64_t>(spec.max_instances));
    for (std::int64_t i = 0; i < count; ++i) {
      const std::size_t k = spec.single_kind ? label : rng.below(spec.kinds.size());
      const bool small = rng.uniform() < spec.small_fraction;
      const auto [w, h] = detail::defect_extent(spec.kinds[k], small, W, H, rng);
      const auto x0 = static_cast<std::size_t>(rng.below(W - w + 1));
      const auto y0 = static_cast<std::size_t>(rng.below(H - h + 1));
      detail::draw_defect(cv, spec.kinds[k], x0, y0, w, h, rng);
      img.instances.push_back({{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(w),
                                static_cast<double>(h)},
                               static_cast<std::int64_t>(k + 1)});
    }
    img.pixels = Image(W, H, 3);
    for (std::size_t i = 0; i < cv.v.size(); ++i) img.pixels.pixels[i] = clamp_u8(cv.v[i] + spec.noise * 255.0 * rng.normal());
    ds.images.push_back(std::move(img));
  }
  return ds;
}

/// Class label of an image: position in the category table of its first instance's category.
inline std::size_t image_label(const Dataset& ds, const AnnotatedImage& img) {
  if (img.instances.empty()) throw InvalidParam("image " + std::to_string(img.id) + " has no instance to label it");
  for (std::size_t k = 0; k < ds.categories.size(); ++k)
    if (ds.categories[k].id == img.instances.front().category_id) return k;
  throw DanglingReference("image " + std::to_string(img.id) + " uses an unknown category");
}

}  // namespace cbamswin
