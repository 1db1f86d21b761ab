#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "reff/error.hpp"
#include "reff/rng.hpp"

namespace reff::data {

inline constexpr std::size_t kGlyphSide = 28;

/// 28 x 28, row-major, 0 or 1.
using Glyph = std::array<std::uint8_t, kGlyphSide * kGlyphSide>;

struct GlyphSet {
  std::vector<Glyph> glyphs;
  std::vector<std::uint8_t> labels;
};

namespace detail {

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

inline std::string hex32(std::uint32_t v) {
  char b[11];
  std::snprintf(b, sizeof b, "0x%08x", v);
  return b;
}

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("idx: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// MNIST IDX image and label files. Pixels are binarized at 128.
inline GlyphSet load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = detail::slurp(images);
  const auto lab = detail::slurp(labels);
  if (img.size() < 16) throw FormatError("idx: " + images.string() + " has " + std::to_string(img.size()) + " bytes, header needs 16");
  if (lab.size() < 8) throw FormatError("idx: " + labels.string() + " has " + std::to_string(lab.size()) + " bytes, header needs 8");
  if (const auto m = detail::read_be32(img.data()); m != 0x00000803)
    throw FormatError("idx: bad image magic " + detail::hex32(m));
  if (const auto m = detail::read_be32(lab.data()); m != 0x00000801)
    throw FormatError("idx: bad label magic " + detail::hex32(m));
  const std::size_t n = detail::read_be32(img.data() + 4);
  const std::size_t rows = detail::read_be32(img.data() + 8), cols = detail::read_be32(img.data() + 12);
  if (rows != kGlyphSide || cols != kGlyphSide)
    throw FormatError("idx: expected 28x28 images, got " + std::to_string(rows) + "x" + std::to_string(cols));
  const std::size_t nl = detail::read_be32(lab.data() + 4);
  if (nl != n) throw FormatError("idx: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  const std::size_t want_img = 16 + n * rows * cols, want_lab = 8 + n;
  if (img.size() != want_img)
    throw FormatError("idx: " + images.string() + " expected " + std::to_string(want_img) + " bytes, got " + std::to_string(img.size()));
  if (lab.size() != want_lab)
    throw FormatError("idx: " + labels.string() + " expected " + std::to_string(want_lab) + " bytes, got " + std::to_string(lab.size()));
  GlyphSet out;
  out.glyphs.resize(n);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < kGlyphSide * kGlyphSide; ++p) out.glyphs[i][p] = img[16 + i * 784 + p] >= 128 ? 1 : 0;
    out.labels[i] = lab[8 + i];
    if (out.labels[i] > 9) throw FormatError("idx: label " + std::to_string(out.labels[i]) + " at index " + std::to_string(i) + " outside 0..9");
  }
  return out;
}

namespace detail {

using Stroke = std::vector<std::pair<double, double>>;

inline Stroke ellipse(double cx, double cy, double rx, double ry, double a0 = 0, double a1 = 2 * std::numbers::pi) {
  Stroke s;
  const int n = 24;
  for (int i = 0; i <= n; ++i) {
    const double a = a0 + (a1 - a0) * i / n;
    s.emplace_back(cx + rx * std::cos(a), cy + ry * std::sin(a));
  }
  return s;
}

// Digit skeletons in a unit box, x right and y down.
inline const std::vector<Stroke>& skeleton(int digit) {
  static const std::array<std::vector<Stroke>, 10> table = {{
      {ellipse(0.5, 0.5, 0.28, 0.42)},
      {{{0.36, 0.22}, {0.54, 0.08}, {0.54, 0.92}}},
      {{{0.22, 0.3}, {0.3, 0.13}, {0.5, 0.07}, {0.7, 0.13}, {0.77, 0.3}, {0.68, 0.5}, {0.2, 0.92}, {0.82, 0.92}}},
      {{{0.22, 0.12}, {0.7, 0.1}, {0.78, 0.26}, {0.68, 0.42}, {0.42, 0.48}, {0.72, 0.56}, {0.8, 0.74}, {0.68, 0.9},
        {0.22, 0.9}}},
      {{{0.66, 0.92}, {0.66, 0.08}, {0.18, 0.64}, {0.86, 0.64}}},
      {{{0.78, 0.08}, {0.3, 0.08}, {0.26, 0.45}, {0.6, 0.42}, {0.78, 0.56}, {0.78, 0.78}, {0.6, 0.92}, {0.22, 0.88}}},
      {{{0.7, 0.08}, {0.44, 0.22}, {0.28, 0.5}}, ellipse(0.5, 0.7, 0.24, 0.21)},
      {{{0.2, 0.1}, {0.8, 0.1}, {0.42, 0.92}}, {{0.38, 0.5}, {0.72, 0.5}}},
      {ellipse(0.5, 0.28, 0.22, 0.19), ellipse(0.5, 0.7, 0.27, 0.22)},
      {ellipse(0.5, 0.31, 0.24, 0.22), {{0.74, 0.32}, {0.7, 0.62}, {0.56, 0.92}}},
  }};
  return table.at(static_cast<std::size_t>(digit));
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = ax + t * dx - px, ey = ay + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

/// Procedural handwriting stand-in: digit skeletons under a random affine
/// jitter (rotation, scale, shear, per-vertex noise) and stroke width, drawn
/// into the central 20 x 20 box of a 28 x 28 glyph like MNIST.
inline Glyph synthetic_glyph(int digit, Rng& rng) {
  if (digit < 0 || digit > 9) throw ValueError("synthetic glyph: digit " + std::to_string(digit) + " outside 0..9");
  const double rot = rng.uniform(-0.2, 0.2), shear = rng.uniform(-0.25, 0.25);
  const double sx = rng.uniform(0.8, 1.05), sy = rng.uniform(0.85, 1.05);
  const double width = rng.uniform(1.1, 1.9);  // half stroke width in glyph pixels
  const double cr = std::cos(rot), sr = std::sin(rot);
  std::vector<detail::Stroke> strokes;
  for (const auto& s : detail::skeleton(digit)) {
    detail::Stroke t;
    for (auto [x, y] : s) {
      x += rng.uniform(-0.03, 0.03);
      y += rng.uniform(-0.03, 0.03);
      double u = (x - 0.5) * sx + shear * (y - 0.5), v = (y - 0.5) * sy;
      const double ru = cr * u - sr * v, rv = sr * u + cr * v;
      t.emplace_back(14.0 + 20.0 * ru, 14.0 + 20.0 * rv);
    }
    strokes.push_back(std::move(t));
  }
  Glyph g{};
  for (std::size_t y = 0; y < kGlyphSide; ++y)
    for (std::size_t x = 0; x < kGlyphSide; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double d = 1e9;
      for (const auto& s : strokes)
        for (std::size_t i = 1; i < s.size(); ++i)
          d = std::min(d, detail::segment_distance(px, py, s[i - 1].first, s[i - 1].second, s[i].first, s[i].second));
      // Anti-aliased intensity, then the same 128 threshold applied to MNIST.
      const double intensity = std::clamp(width - d + 0.5, 0.0, 1.0) * 255.0;
      g[y * kGlyphSide + x] = intensity >= 128.0 ? 1 : 0;
    }
  return g;
}

/// Where glyphs come from: a loaded MNIST set, or the synthetic generator.
class GlyphSource {
 public:
  GlyphSource() = default;  // synthetic
  explicit GlyphSource(GlyphSet set) : set_(std::move(set)) {
    for (std::size_t i = 0; i < set_.labels.size(); ++i) by_label_[set_.labels[i]].push_back(i);
  }

  bool synthetic() const noexcept { return set_.glyphs.empty(); }
  std::string name() const { return synthetic() ? "synthetic" : "mnist"; }

  Glyph draw(int digit, Rng& rng) const {
    if (synthetic()) return synthetic_glyph(digit, rng);
    const auto& pool = by_label_.at(static_cast<std::size_t>(digit));
    if (pool.empty()) throw ValueError("glyph source: no glyphs with label " + std::to_string(digit));
    return set_.glyphs[pool[rng.below(pool.size())]];
  }

 private:
  GlyphSet set_;
  std::array<std::vector<std::size_t>, 10> by_label_;
};

}  // namespace reff::data
