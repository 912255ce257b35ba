#pragma once

// 8-bit images (interleaved HWC) and binary/ASCII netpbm I/O.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cbamswin/tensor.hpp"

namespace cbamswin {

struct Image {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, channels interleaved

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {
    if (c != 1 && c != 3) throw InvalidParam("images have 1 or 3 channels");
  }

  bool empty() const { return pixels.empty(); }
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

/// [3,H,W] tensor with values in [0,1]; gray images are replicated.
inline Tensor image_to_tensor(const Image& img) {
  const std::size_t H = img.height, W = img.width;
  std::vector<double> v(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        v[(c * H + y) * W + x] = img.at(x, y, img.channels == 3 ? c : 0) / 255.0;
  return Tensor({3, H, W}, std::move(v));
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
inline Image resize_image(const Image& img, std::size_t W, std::size_t H) {
  if (W == 0 || H == 0) throw InvalidParam("resize target must be non-empty");
  if (W == img.width && H == img.height) return img;
  Image out(W, H, img.channels);
  const double sx = static_cast<double>(img.width) / static_cast<double>(W);
  const double sy = static_cast<double>(img.height) / static_cast<double>(H);
  for (std::size_t y = 0; y < H; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1 - tx) * img.at(x0, y0, c) + tx * img.at(x1, y0, c);
        const double bottom = (1 - tx) * img.at(x0, y1, c) + tx * img.at(x1, y1, c);
        out.at(x, y, c) = clamp_u8((1 - ty) * top + ty * bottom);
      }
    }
  }
  return out;
}

namespace detail {
inline void skip_pnm_space(std::istream& in) {
  for (;;) {
    const int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      return;
    }
  }
}

inline std::size_t read_pnm_int(std::istream& in, const std::string& path) {
  skip_pnm_space(in);
  long v = -1;
  if (!(in >> v) || v <= 0) throw ParseError("bad netpbm header in " + path);
  return static_cast<std::size_t>(v);
}
}  // namespace detail

/// Reads P2/P3/P5/P6 with maxval <= 255.
inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  in >> magic;
  const bool ascii = magic == "P2" || magic == "P3";
  const bool gray = magic == "P2" || magic == "P5";
  if (!ascii && magic != "P5" && magic != "P6") throw ParseError(path + " is not a PGM/PPM file");
  const std::size_t w = detail::read_pnm_int(in, path);
  const std::size_t h = detail::read_pnm_int(in, path);
  const std::size_t maxval = detail::read_pnm_int(in, path);
  if (maxval > 255) throw ParseError(path + ": only 8-bit netpbm is supported");
  Image img(w, h, gray ? 1 : 3);
  if (ascii) {
    for (auto& p : img.pixels) {
      long v;
      if (!(in >> v)) throw ParseError(path + ": truncated pixel data");
      p = static_cast<std::uint8_t>(v * 255 / static_cast<long>(maxval));
    }
  } else {
    in.get();  // single whitespace after maxval
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
      throw ParseError(path + ": truncated pixel data");
    }
    if (maxval != 255)
      for (auto& p : img.pixels) p = static_cast<std::uint8_t>(p * 255 / maxval);
  }
  return img;
}

inline void write_pnm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace cbamswin
