#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "reff/error.hpp"
#include "reff/io/png.hpp"
#include "reff/rng.hpp"

namespace reff::data {

using io::RgbImage;

enum class TextureFamily { Grating, Checkerboard, Stripes, Noise, Blobs };

inline std::string to_string(TextureFamily f) {
  switch (f) {
    case TextureFamily::Grating: return "grating";
    case TextureFamily::Checkerboard: return "checkerboard";
    case TextureFamily::Stripes: return "stripes";
    case TextureFamily::Noise: return "noise";
    case TextureFamily::Blobs: return "blobs";
  }
  return "?";
}

using Rgb = std::array<float, 3>;

inline Rgb hsv(double h, double s, double v) {
  h = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (i) {
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
    default: break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

/// One procedural texture class: a pattern family at a fixed orientation and
/// frequency, rendered as a blend of two palette colors.
struct TextureSpec {
  TextureFamily family = TextureFamily::Grating;
  double angle = 0;      // radians
  double frequency = 8;  // cycles (or cells, blobs) per 64 px
  Rgb color0{}, color1{};
};

namespace detail {

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Pattern intensity in [0, 1] for every pixel.
inline std::vector<double> pattern(const TextureSpec& spec, std::uint64_t seed, std::size_t H, std::size_t W) {
  Rng rng(seed);
  const double pi = std::numbers::pi;
  // Small per-instance variation: phase, offset and +-4 degrees of rotation.
  const double angle = spec.angle + rng.uniform(-1.0, 1.0) * pi / 45;
  const double phase = rng.uniform(0, 2 * pi), ox = rng.uniform(0, 64), oy = rng.uniform(0, 64);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double k = spec.frequency / 64.0;  // cycles per pixel
  std::vector<double> t(H * W);
  auto coords = [&](std::size_t y, std::size_t x) {
    const double fx = static_cast<double>(x) + ox, fy = static_cast<double>(y) + oy;
    return std::pair{fx * ca + fy * sa, -fx * sa + fy * ca};
  };
  switch (spec.family) {
    case TextureFamily::Grating:
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          auto [u, v] = coords(y, x);
          t[y * W + x] = 0.5 + 0.5 * std::sin(2 * pi * k * u + phase);
        }
      break;
    case TextureFamily::Checkerboard:
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          auto [u, v] = coords(y, x);
          const auto c = static_cast<long long>(std::floor(u * k * 2)) + static_cast<long long>(std::floor(v * k * 2));
          t[y * W + x] = (c & 1) ? 1.0 : 0.0;
        }
      break;
    case TextureFamily::Stripes: {
      const double duty = 0.3;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          auto [u, v] = coords(y, x);
          const double f = u * k + phase / (2 * pi);
          t[y * W + x] = (f - std::floor(f)) < duty ? 1.0 : 0.0;
        }
      break;
    }
    case TextureFamily::Noise: {
      // Bilinear value noise on a lattice of `frequency` cells per 64 px.
      const double cell = 64.0 / spec.frequency;
      const std::size_t gw = static_cast<std::size_t>(std::ceil(static_cast<double>(W) / cell)) + 2;
      const std::size_t gh = static_cast<std::size_t>(std::ceil(static_cast<double>(H) / cell)) + 2;
      std::vector<double> grid(gw * gh);
      for (auto& g : grid) g = rng.uniform();
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double gx = static_cast<double>(x) / cell, gy = static_cast<double>(y) / cell;
          const auto x0 = static_cast<std::size_t>(gx), y0 = static_cast<std::size_t>(gy);
          const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
          auto g = [&](std::size_t i, std::size_t j) { return grid[i * gw + j]; };
          t[y * W + x] = (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x0 + 1)) +
                         fy * ((1 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1));
        }
      break;
    }
    case TextureFamily::Blobs: {
      // Gaussian bumps on a jittered grid; frequency sets the grid pitch.
      const double pitch = 64.0 / spec.frequency, sigma = pitch * 0.3;
      const auto nx = static_cast<std::size_t>(std::ceil(static_cast<double>(W) / pitch)) + 1;
      const auto ny = static_cast<std::size_t>(std::ceil(static_cast<double>(H) / pitch)) + 1;
      std::fill(t.begin(), t.end(), 0.0);
      for (std::size_t i = 0; i < ny; ++i)
        for (std::size_t j = 0; j < nx; ++j) {
          const double cx = (static_cast<double>(j) + rng.uniform(-0.3, 0.3)) * pitch;
          const double cy = (static_cast<double>(i) + rng.uniform(-0.3, 0.3)) * pitch;
          const long x0 = std::max(0L, std::lround(cx - 3 * sigma)), x1 = std::min<long>(static_cast<long>(W) - 1, std::lround(cx + 3 * sigma));
          const long y0 = std::max(0L, std::lround(cy - 3 * sigma)), y1 = std::min<long>(static_cast<long>(H) - 1, std::lround(cy + 3 * sigma));
          for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) {
              const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
              auto& v = t[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
              v = std::max(v, std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
            }
        }
      break;
    }
  }
  return t;
}

}  // namespace detail

/// Two disjoint sets of texture classes. Class ids 0..D-1 are digit textures,
/// D..D+B-1 background textures. Procedural classes differ in (family,
/// orientation, frequency) and palette; folder classes hold PNG files.
class TextureBank {
 public:
  TextureBank() = default;

  /// Procedural bank. Digit palettes are bright, background palettes darker,
  /// and hues are spread evenly within each bank.
  static TextureBank procedural(std::size_t digit_classes, std::size_t background_classes) {
    if (digit_classes == 0 || background_classes == 0) throw ConfigError("texture bank: both banks need at least one class");
    TextureBank b;
    b.digit_ = digit_classes;
    b.background_ = background_classes;
    const double pi = std::numbers::pi;
    const TextureFamily families[] = {TextureFamily::Grating, TextureFamily::Checkerboard, TextureFamily::Stripes,
                                      TextureFamily::Noise, TextureFamily::Blobs};
    const double angles[] = {0, pi / 4, pi / 2, 3 * pi / 4, pi / 8, 5 * pi / 8};
    const double freqs[] = {6, 10, 16};
    for (std::size_t i = 0; i < digit_classes + background_classes; ++i) {
      const bool digit = i < digit_classes;
      const std::size_t j = digit ? i : i - digit_classes;
      const std::size_t n = digit ? digit_classes : background_classes;
      TextureSpec s;
      s.family = families[j % 5];
      s.angle = angles[(j / 5 + j) % 6];
      s.frequency = freqs[(j + j / 3) % 3];
      const double hue = (static_cast<double>(j) + (digit ? 0.5 : 0.0)) / static_cast<double>(n);
      s.color0 = digit ? hsv(hue, 0.55, 0.65) : hsv(hue, 0.7, 0.12);
      s.color1 = digit ? hsv(hue, 0.35, 1.0) : hsv(hue, 0.8, 0.5);
      b.specs_.push_back(s);
    }
    return b;
  }

  /// Folder bank: `digit_dir` and `background_dir` each hold one subdirectory
  /// per class with PNG files. Patches are resized to the requested canvas.
  static TextureBank from_folders(const std::filesystem::path& digit_dir, const std::filesystem::path& background_dir) {
    TextureBank b;
    auto scan = [&](const std::filesystem::path& root) {
      if (!std::filesystem::is_directory(root)) throw IoError("texture bank: not a directory: " + root.string());
      std::vector<std::filesystem::path> classes;
      for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory()) classes.push_back(e.path());
      std::sort(classes.begin(), classes.end());
      for (const auto& c : classes) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(c))
          if (e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw IoError("texture bank: no PNG files in " + c.string());
        b.files_.push_back(std::move(files));
      }
      return classes.size();
    };
    b.digit_ = scan(digit_dir);
    b.background_ = scan(background_dir);
    if (b.digit_ == 0 || b.background_ == 0) throw ConfigError("texture bank: both banks need at least one class");
    return b;
  }

  std::size_t digit_classes() const noexcept { return digit_; }
  std::size_t background_classes() const noexcept { return background_; }
  std::size_t digit_id(std::size_t i) const { return i; }
  std::size_t background_id(std::size_t i) const { return digit_ + i; }
  bool is_digit(std::size_t id) const noexcept { return id < digit_; }
  bool procedural() const noexcept { return files_.empty(); }
  const TextureSpec& spec(std::size_t id) const { return specs_.at(id); }

  /// Texture patch of class `id`; identical for identical (id, seed, size).
  RgbImage patch(std::size_t id, std::uint64_t seed, std::size_t H, std::size_t W) const {
    if (id >= digit_ + background_) throw ValueError("texture bank: class " + std::to_string(id) + " out of range");
    RgbImage img{H, W, std::vector<std::uint8_t>(H * W * 3)};
    if (!procedural()) {
      const auto& files = files_[id];
      RgbImage src = io::read_png(files[seed % files.size()]);
      io::resize_rgb(src, img);
      return img;
    }
    const TextureSpec& s = specs_[id];
    const std::vector<double> t = detail::pattern(s, seed, H, W);
    for (std::size_t i = 0; i < H * W; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        img.pixels[i * 3 + c] = detail::to_byte(s.color0[c] + t[i] * (s.color1[c] - s.color0[c]));
    return img;
  }

 private:
  std::size_t digit_ = 0, background_ = 0;
  std::vector<TextureSpec> specs_;
  std::vector<std::vector<std::filesystem::path>> files_;
};

}  // namespace reff::data
