#pragma once

// Geometric augmentation of annotated images.
//
// Coordinates are continuous with pixel (i, j) covering [i, i+1) x [j, j+1).
// Every transform is an affine map about the image centre c = (W/2, H/2):
//
//     p' = A (p - c) + c + t
//
// Pixels are resampled by inverse mapping with bilinear interpolation and zero
// fill. Boxes map their four corners and keep the axis-aligned hull, clamped
// to the image. Positive rotation angles turn content clockwise on screen
// (y points down).

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbamswin/dataset.hpp"
#include "cbamswin/rng.hpp"

namespace cbamswin {

enum class TransformKind { HFlip, VFlip, Scale, Rotate, Shear, Translate };

struct Transform {
  TransformKind kind = TransformKind::HFlip;
  double a = 0.0;  // scale factor, angle in degrees, shear k, or dx
  double b = 0.0;  // dy for translate

  static Transform hflip() { return {TransformKind::HFlip}; }
  static Transform vflip() { return {TransformKind::VFlip}; }
  static Transform scale(double s) { return {TransformKind::Scale, s}; }
  static Transform rotate(double degrees) { return {TransformKind::Rotate, degrees}; }
  static Transform shear(double k) { return {TransformKind::Shear, k}; }
  static Transform translate(double dx, double dy) { return {TransformKind::Translate, dx, dy}; }
  bool operator==(const Transform&) const = default;
};

inline constexpr double kMinScale = 0.5, kMaxScale = 1.5;
inline constexpr double kMaxRotateDegrees = 15.0;
inline constexpr double kMaxShear = 0.2;
inline constexpr double kMaxTranslateFraction = 0.2;
inline constexpr double kMinBoxArea = 4.0;

inline std::string to_string(const Transform& t) {
  switch (t.kind) {
    case TransformKind::HFlip: return "hflip";
    case TransformKind::VFlip: return "vflip";
    case TransformKind::Scale: return "scale(" + std::to_string(t.a) + ")";
    case TransformKind::Rotate: return "rotate(" + std::to_string(t.a) + ")";
    case TransformKind::Shear: return "shear(" + std::to_string(t.a) + ")";
    case TransformKind::Translate: return "translate(" + std::to_string(t.a) + "," + std::to_string(t.b) + ")";
  }
  return "?";
}

inline nlohmann::json to_json(const Transform& t) {
  static const char* names[] = {"hflip", "vflip", "scale", "rotate", "shear", "translate"};
  nlohmann::json j{{"op", names[static_cast<int>(t.kind)]}};
  if (t.kind == TransformKind::Translate) {
    j["dx"] = t.a;
    j["dy"] = t.b;
  } else if (t.kind != TransformKind::HFlip && t.kind != TransformKind::VFlip) {
    j["value"] = t.a;
  }
  return j;
}

inline Transform transform_from_json(const nlohmann::json& j) {
  const std::string op = j.at("op").get<std::string>();
  if (op == "hflip") return Transform::hflip();
  if (op == "vflip") return Transform::vflip();
  if (op == "scale") return Transform::scale(j.at("value").get<double>());
  if (op == "rotate") return Transform::rotate(j.at("value").get<double>());
  if (op == "shear") return Transform::shear(j.at("value").get<double>());
  if (op == "translate") return Transform::translate(j.at("dx").get<double>(), j.at("dy").get<double>());
  throw ParseError("unknown transform '" + op + "'");
}

namespace detail {

/// Rotations by whole quarter turns use exact sines so lattice points map to lattice points.
inline bool quarter_turn(double degrees, int& turns) {
  const double q = degrees / 90.0;
  if (q != std::round(q)) return false;
  turns = static_cast<int>(((static_cast<long>(std::round(q)) % 4) + 4) % 4);
  return true;
}

struct Affine {
  std::array<double, 4> A{1, 0, 0, 1};  // row-major 2x2
  double tx = 0, ty = 0;
  double cx = 0, cy = 0;

  std::array<double, 2> forward(double x, double y) const {
    const double u = x - cx, v = y - cy;
    return {A[0] * u + A[1] * v + cx + tx, A[2] * u + A[3] * v + cy + ty};
  }
  std::array<double, 2> inverse(double x, double y) const {
    const double det = A[0] * A[3] - A[1] * A[2];
    const double u = x - cx - tx, v = y - cy - ty;
    return {(A[3] * u - A[1] * v) / det + cx, (-A[2] * u + A[0] * v) / det + cy};
  }
};

inline Affine affine_for(const Transform& t, std::size_t W, std::size_t H) {
  Affine m;
  m.cx = static_cast<double>(W) / 2.0;
  m.cy = static_cast<double>(H) / 2.0;
  switch (t.kind) {
    case TransformKind::HFlip: m.A = {-1, 0, 0, 1}; break;
    case TransformKind::VFlip: m.A = {1, 0, 0, -1}; break;
    case TransformKind::Scale: m.A = {t.a, 0, 0, t.a}; break;
    case TransformKind::Shear: m.A = {1, t.a, 0, 1}; break;
    case TransformKind::Translate:
      m.tx = t.a;
      m.ty = t.b;
      break;
    case TransformKind::Rotate: {
      int turns = 0;
      double c, s;
      if (quarter_turn(t.a, turns)) {
        static constexpr double kCos[] = {1, 0, -1, 0}, kSin[] = {0, 1, 0, -1};
        c = kCos[turns];
        s = kSin[turns];
      } else {
        const double r = t.a * std::numbers::pi / 180.0;
        c = std::cos(r);
        s = std::sin(r);
      }
      m.A = {c, -s, s, c};
      break;
    }
  }
  return m;
}

}  // namespace detail

/// Throws InvalidParam when a parameter is outside its documented range.
/// Rotations are limited to 15 degrees, except exact multiples of 90.
inline void validate_transform(const Transform& t, std::size_t W, std::size_t H) {
  auto fail = [&](const std::string& why) { throw InvalidParam(to_string(t) + ": " + why); };
  int turns = 0;
  switch (t.kind) {
    case TransformKind::HFlip:
    case TransformKind::VFlip: return;
    case TransformKind::Scale:
      if (!(t.a >= kMinScale && t.a <= kMaxScale)) fail("scale must lie in [0.5, 1.5]");
      return;
    case TransformKind::Rotate:
      if (!(std::abs(t.a) <= kMaxRotateDegrees) && !detail::quarter_turn(t.a, turns)) {
        fail("rotation must be within 15 degrees or a multiple of 90");
      }
      return;
    case TransformKind::Shear:
      if (!(std::abs(t.a) <= kMaxShear)) fail("shear must lie in [-0.2, 0.2]");
      return;
    case TransformKind::Translate:
      if (!(std::abs(t.a) <= kMaxTranslateFraction * static_cast<double>(W)) ||
          !(std::abs(t.b) <= kMaxTranslateFraction * static_cast<double>(H))) {
        fail("translation must be within 0.2 of the image extent");
      }
      return;
  }
}

/// Maps a box through `t`; returns false when the result should be dropped
/// (empty after clamping, or shrunk below 4 px^2).
inline bool transform_box(const Transform& t, std::size_t W, std::size_t H, const BBox& in, BBox& out) {
  const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
  if (t.kind == TransformKind::HFlip) {
    out = {Wd - in.x - in.w, in.y, in.w, in.h};
  } else if (t.kind == TransformKind::VFlip) {
    out = {in.x, Hd - in.y - in.h, in.w, in.h};
  } else {
    const auto m = detail::affine_for(t, W, H);
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (double cx : {in.x, in.x + in.w})
      for (double cy : {in.y, in.y + in.h}) {
        const auto p = m.forward(cx, cy);
        x0 = std::min(x0, p[0]);
        x1 = std::max(x1, p[0]);
        y0 = std::min(y0, p[1]);
        y1 = std::max(y1, p[1]);
      }
    out = {x0, y0, x1 - x0, y1 - y0};
  }
  const double cx0 = std::clamp(out.x, 0.0, Wd), cx1 = std::clamp(out.x + out.w, 0.0, Wd);
  const double cy0 = std::clamp(out.y, 0.0, Hd), cy1 = std::clamp(out.y + out.h, 0.0, Hd);
  if (cx0 != out.x || cx1 != out.x + out.w || cy0 != out.y || cy1 != out.y + out.h) {
    out = {cx0, cy0, cx1 - cx0, cy1 - cy0};
  }
  if (out.w <= 0 || out.h <= 0) return false;
  return !(out.area() < kMinBoxArea && out.area() < in.area());
}

/// Bilinear inverse-mapped warp with zero fill.
inline Image warp_image(const Image& img, const Transform& t) {
  const std::size_t W = img.width, H = img.height, C = img.channels;
  Image out(W, H, C);
  const auto m = detail::affine_for(t, W, H);
  auto sample = [&](long x, long y, std::size_t c) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) return 0.0;
    return img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c);
  };
  for (std::size_t j = 0; j < H; ++j)
    for (std::size_t i = 0; i < W; ++i) {
      const auto p = m.inverse(static_cast<double>(i) + 0.5, static_cast<double>(j) + 0.5);
      const double sx = p[0] - 0.5, sy = p[1] - 0.5;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      for (std::size_t c = 0; c < C; ++c) {
        double v = (1 - fx) * (1 - fy) * sample(x0, y0, c);
        if (fx > 0) v += fx * (1 - fy) * sample(x0 + 1, y0, c);
        if (fy > 0) v += (1 - fx) * fy * sample(x0, y0 + 1, c);
        if (fx > 0 && fy > 0) v += fx * fy * sample(x0 + 1, y0 + 1, c);
        out.at(i, j, c) = clamp_u8(v);
      }
    }
  return out;
}

/// Applies one transform to pixels (when present) and boxes.
inline AnnotatedImage augment(const AnnotatedImage& img, const Transform& t) {
  validate_transform(t, img.width, img.height);
  AnnotatedImage out = img;
  if (!img.pixels.empty()) out.pixels = warp_image(img.pixels, t);
  out.instances.clear();
  for (const auto& inst : img.instances) {
    BBox b;
    if (transform_box(t, img.width, img.height, inst.box, b)) out.instances.push_back({b, inst.category_id});
  }
  return out;
}

inline AnnotatedImage augment(const AnnotatedImage& img, const std::vector<Transform>& chain) {
  AnnotatedImage out = img;
  for (const auto& t : chain) out = augment(out, t);
  return out;
}

/// Uniformly chosen transform kind with parameters drawn inside the documented ranges.
inline Transform random_transform(Rng& rng, std::size_t W, std::size_t H) {
  switch (rng.below(6)) {
    case 0: return Transform::hflip();
    case 1: return Transform::vflip();
    case 2: return Transform::scale(rng.uniform(kMinScale, kMaxScale));
    case 3: return Transform::rotate(rng.uniform(-kMaxRotateDegrees, kMaxRotateDegrees));
    case 4: return Transform::shear(rng.uniform(-kMaxShear, kMaxShear));
    default:
      return Transform::translate(rng.uniform(-kMaxTranslateFraction, kMaxTranslateFraction) * static_cast<double>(W),
                                  rng.uniform(-kMaxTranslateFraction, kMaxTranslateFraction) * static_cast<double>(H));
  }
}

}  // namespace cbamswin
