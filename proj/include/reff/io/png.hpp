#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "reff/error.hpp"

namespace reff::io {

/// Row-major H x W x 3 bytes.
struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

inline RgbImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("png: cannot read " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  RgbImage out{img.height, img.width, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("png: cannot decode " + path.string() + ": " + img.message);
  }
  return out;
}

/// 8-bit RGB, no gamma or time chunks, so output bytes depend only on pixels.
inline void write_png(const std::filesystem::path& path, const RgbImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw IoError("png: cannot write " + path.string() + ": " + img.message);
}

/// Bilinear (half-pixel centers) resize of `src` into `dst`'s extent.
inline void resize_rgb(const RgbImage& src, RgbImage& dst) {
  dst.pixels.assign(dst.height * dst.width * 3, 0);
  auto coord = [](std::size_t i, std::size_t in, std::size_t out) {
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < dst.height; ++y) {
    const double sy = coord(y, src.height, dst.height);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dst.width; ++x) {
      const double sx = coord(x, src.width, dst.width);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c)) +
                         fy * ((1 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c));
        dst.pixels[(y * dst.width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
}

}  // namespace reff::io
