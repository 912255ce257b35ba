#pragma once

// Intensity enhancement for 8-bit images.
//
//   he     global histogram equalization, lut[v] = floor(255 * cdf(v) / N)
//   ahe    contrast-limited tiled equalization with bilinear blending of tile maps
//   cet    linear stretch between the low/high percentiles
//   msrcp  multi-scale retinex on the intensity channel, chromaticity preserved
//
// he, ahe and cet act on each channel independently.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cbamswin/image.hpp"

namespace cbamswin {

enum class EnhanceMethod { HE, AHE, CET, MSRCP };

inline EnhanceMethod enhance_method_from_string(const std::string& s) {
  if (s == "he" || s == "HE") return EnhanceMethod::HE;
  if (s == "ahe" || s == "AHE") return EnhanceMethod::AHE;
  if (s == "cet" || s == "CET") return EnhanceMethod::CET;
  if (s == "msrcp" || s == "MSRCP") return EnhanceMethod::MSRCP;
  throw InvalidParam("unknown enhancement '" + s + "' (expected he|ahe|cet|msrcp)");
}

struct EnhanceParams {
  double clip_limit = 2.0;  // ahe: multiple of the mean bin height
  std::size_t tiles_x = 8, tiles_y = 8;
  double p_low = 2.0, p_high = 98.0;  // cet percentiles
  std::vector<double> scales{15.0, 80.0, 250.0};  // msrcp Gaussian sigmas
};

using Lut = std::array<std::uint8_t, 256>;

inline std::vector<std::uint8_t> channel_values(const Image& img, std::size_t c) {
  std::vector<std::uint8_t> v(img.width * img.height);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i * img.channels + c];
  return v;
}

inline Lut equalization_lut(const std::array<double, 256>& hist) {
  double total = 0;
  for (double h : hist) total += h;
  Lut lut{};
  double cdf = 0;
  for (std::size_t v = 0; v < 256; ++v) {
    cdf += hist[v];
    lut[v] = static_cast<std::uint8_t>(std::min(255.0, std::floor(255.0 * cdf / total)));
  }
  return lut;
}

inline Image equalize_histogram(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    std::array<double, 256> hist{};
    for (auto v : channel_values(img, c)) hist[v] += 1;
    const Lut lut = equalization_lut(hist);
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
      out.pixels[i * img.channels + c] = lut[img.pixels[i * img.channels + c]];
    }
  }
  return out;
}

/// Clips each bin at clip_limit * (tile pixels / 256) and spreads the excess evenly.
inline void clip_histogram(std::array<double, 256>& hist, double limit) {
  double excess = 0;
  for (double& h : hist) {
    if (h > limit) {
      excess += h - limit;
      h = limit;
    }
  }
  for (double& h : hist) h += excess / 256.0;
}

inline Image adaptive_equalize(const Image& img, const EnhanceParams& p) {
  if (p.tiles_x == 0 || p.tiles_y == 0) throw InvalidParam("ahe tile grid must be at least 1x1");
  if (!(p.clip_limit > 0)) throw InvalidParam("ahe clip limit must be positive");
  const std::size_t W = img.width, H = img.height;
  const std::size_t tx = std::min(p.tiles_x, W), ty = std::min(p.tiles_y, H);
  // Tile t spans [t*W/tx, (t+1)*W/tx).
  auto tile_lo = [](std::size_t t, std::size_t n, std::size_t ext) { return t * ext / n; };
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    std::vector<Lut> luts(tx * ty);
    for (std::size_t j = 0; j < ty; ++j)
      for (std::size_t i = 0; i < tx; ++i) {
        std::array<double, 256> hist{};
        const std::size_t x0 = tile_lo(i, tx, W), x1 = tile_lo(i + 1, tx, W);
        const std::size_t y0 = tile_lo(j, ty, H), y1 = tile_lo(j + 1, ty, H);
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) hist[img.at(x, y, c)] += 1;
        const double area = static_cast<double>((x1 - x0) * (y1 - y0));
        clip_histogram(hist, std::max(1.0, p.clip_limit * area / 256.0));
        luts[j * tx + i] = equalization_lut(hist);
      }
    // Blend the four nearest tile maps by distance to tile centres.
    auto centre = [&](std::size_t t, std::size_t n, std::size_t ext) {
      return 0.5 * static_cast<double>(tile_lo(t, n, ext) + tile_lo(t + 1, n, ext));
    };
    auto locate = [&](double pos, std::size_t n, std::size_t ext, std::size_t& a, std::size_t& b, double& f) {
      a = 0;
      while (a + 1 < n && centre(a + 1, n, ext) <= pos) ++a;
      b = std::min(a + 1, n - 1);
      const double ca = centre(a, n, ext), cb = centre(b, n, ext);
      f = b == a ? 0.0 : std::clamp((pos - ca) / (cb - ca), 0.0, 1.0);
    };
    for (std::size_t y = 0; y < H; ++y) {
      std::size_t ja, jb;
      double fy;
      locate(static_cast<double>(y) + 0.5, ty, H, ja, jb, fy);
      for (std::size_t x = 0; x < W; ++x) {
        std::size_t ia, ib;
        double fx;
        locate(static_cast<double>(x) + 0.5, tx, W, ia, ib, fx);
        const auto v = img.at(x, y, c);
        const double top = (1 - fx) * luts[ja * tx + ia][v] + fx * luts[ja * tx + ib][v];
        const double bottom = (1 - fx) * luts[jb * tx + ia][v] + fx * luts[jb * tx + ib][v];
        out.at(x, y, c) = clamp_u8((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

/// Nearest-rank percentile over sorted values: index floor(p/100 * (n-1)).
inline std::uint8_t percentile(std::vector<std::uint8_t> v, double p) {
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(std::floor(p / 100.0 * static_cast<double>(v.size() - 1)));
  return v[idx];
}

inline Image contrast_stretch(const Image& img, const EnhanceParams& p) {
  if (!(p.p_low >= 0 && p.p_low < p.p_high && p.p_high <= 100)) {
    throw InvalidParam("cet percentiles must satisfy 0 <= low < high <= 100");
  }
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    auto vals = channel_values(img, c);
    const double lo = percentile(vals, p.p_low), hi = percentile(vals, p.p_high);
    if (hi <= lo) continue;  // flat channel: nothing to stretch
    for (std::size_t i = 0; i < vals.size(); ++i) {
      out.pixels[i * img.channels + c] = clamp_u8((vals[i] - lo) * 255.0 / (hi - lo));
    }
  }
  return out;
}

/// Separable Gaussian blur with edge replication; radius capped at the image extent.
inline std::vector<double> gaussian_blur(const std::vector<double>& src, std::size_t W, std::size_t H, double sigma) {
  const auto radius = static_cast<long>(std::min(std::ceil(3.0 * sigma), static_cast<double>(std::max(W, H))));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0;
  for (long i = -radius; i <= radius; ++i) {
    norm += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  }
  for (double& v : k) v /= norm;
  auto pass = [&](const std::vector<double>& in, bool horizontal) {
    std::vector<double> out(in.size());
    const long Wl = static_cast<long>(W), Hl = static_cast<long>(H);
    for (long y = 0; y < Hl; ++y)
      for (long x = 0; x < Wl; ++x) {
        double s = 0;
        for (long d = -radius; d <= radius; ++d) {
          const long xx = horizontal ? std::clamp(x + d, 0L, Wl - 1) : x;
          const long yy = horizontal ? y : std::clamp(y + d, 0L, Hl - 1);
          s += k[static_cast<std::size_t>(d + radius)] * in[static_cast<std::size_t>(yy * Wl + xx)];
        }
        out[static_cast<std::size_t>(y * Wl + x)] = s;
      }
    return out;
  };
  return pass(pass(src, true), false);
}

inline Image msrcp(const Image& img, const EnhanceParams& p) {
  if (p.scales.empty()) throw InvalidParam("msrcp needs at least one scale");
  for (double s : p.scales)
    if (!(s > 0)) throw InvalidParam("msrcp scales must be positive");
  const std::size_t W = img.width, H = img.height, N = W * H, C = img.channels;
  std::vector<double> intensity(N);
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += img.pixels[i * C + c];
    intensity[i] = s / static_cast<double>(C);
  }
  std::vector<double> retinex(N, 0.0);
  for (double sigma : p.scales) {
    const auto blurred = gaussian_blur(intensity, W, H, sigma);
    for (std::size_t i = 0; i < N; ++i) retinex[i] += std::log(intensity[i] + 1.0) - std::log(blurred[i] + 1.0);
  }
  for (double& r : retinex) r /= static_cast<double>(p.scales.size());
  const auto [mn, mx] = std::minmax_element(retinex.begin(), retinex.end());
  const double lo = *mn, span = *mx - *mn;
  Image out = img;
  for (std::size_t i = 0; i < N; ++i) {
    const double target = span > 0 ? (retinex[i] - lo) * 255.0 / span : intensity[i];
    if (C == 1 || intensity[i] <= 0) {
      for (std::size_t c = 0; c < C; ++c) out.pixels[i * C + c] = clamp_u8(target);
      continue;
    }
    // Scale all channels by one factor, bounded so no channel exceeds 255.
    double peak = 0;
    for (std::size_t c = 0; c < C; ++c) peak = std::max<double>(peak, img.pixels[i * C + c]);
    const double amp = std::min(255.0 / peak, target / intensity[i]);
    for (std::size_t c = 0; c < C; ++c) out.pixels[i * C + c] = clamp_u8(amp * img.pixels[i * C + c]);
  }
  return out;
}

inline Image enhance(const Image& img, EnhanceMethod method, const EnhanceParams& p = {}) {
  if (img.empty()) throw InvalidParam("cannot enhance an image without pixels");
  switch (method) {
    case EnhanceMethod::HE: return equalize_histogram(img);
    case EnhanceMethod::AHE: return adaptive_equalize(img, p);
    case EnhanceMethod::CET: return contrast_stretch(img, p);
    case EnhanceMethod::MSRCP: return msrcp(img, p);
  }
  return img;
}

}  // namespace cbamswin
