#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "reff/data/dataset.hpp"
#include "reff/gradcam.hpp"
#include "reff/io/png.hpp"
#include "reff/nn/classifier.hpp"

namespace reff::harness {

/// Blue (t = 0) to red (t = 1) through purple. The red channel is strictly
/// increasing in t, the blue channel strictly decreasing.
inline std::array<std::uint8_t, 3> colormap(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto r = static_cast<std::uint8_t>(std::lround(255.0 * t));
  const auto g = static_cast<std::uint8_t>(std::lround(64.0 * (1.0 - std::abs(2.0 * t - 1.0))));
  const auto b = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)));
  return {r, g, b};
}

/// Colormapped heat layer for an H x W map, scaled by its maximum. A zero map
/// is uniformly blue.
inline io::RgbImage heat_layer(std::span<const float> map, std::size_t H, std::size_t W) {
  io::RgbImage out{H, W, std::vector<std::uint8_t>(H * W * 3)};
  const float mx = *std::max_element(map.begin(), map.end());
  for (std::size_t i = 0; i < H * W; ++i) {
    const auto c = colormap(mx > 0 ? map[i] / mx : 0.0);
    std::copy(c.begin(), c.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(i * 3));
  }
  return out;
}

/// Heat layer alpha-blended over `image` with weight `alpha`.
inline io::RgbImage overlay(const io::RgbImage& image, std::span<const float> map, double alpha = 0.5) {
  io::RgbImage heat = heat_layer(map, image.height, image.width);
  for (std::size_t i = 0; i < heat.pixels.size(); ++i)
    heat.pixels[i] = static_cast<std::uint8_t>(std::lround(alpha * heat.pixels[i] + (1.0 - alpha) * image.pixels[i]));
  return heat;
}

inline io::RgbImage dataset_image(const data::Dataset& d, std::size_t i) {
  const std::size_t n = d.pixels() * 3;
  return io::RgbImage{d.height, d.width,
                      std::vector<std::uint8_t>(d.images.begin() + static_cast<std::ptrdiff_t>(i * n),
                                                d.images.begin() + static_cast<std::ptrdiff_t>((i + 1) * n))};
}

/// Writes sample{idx}_input.png and sample{idx}_tap{l}.png (explanation of the
/// predicted class over the input) for every index and tap. Returns the paths.
inline std::vector<std::filesystem::path> render_heatmaps(const nn::ClassifierNet<float>& net, const data::Dataset& d,
                                                          std::span<const std::size_t> indices, const std::set<int>& taps,
                                                          const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (std::size_t i : indices) {
    if (i >= d.size()) throw ValueError("render_heatmaps: sample " + std::to_string(i) + " out of range");
    std::vector<std::size_t> one{i};
    const Tensor<float> x = d.image_batch(std::span<const std::size_t>(one));
    const auto pred = argmax_rows(net.forward(x).logits);
    const auto maps = explain(net, x, std::span<const int>(pred), taps);
    const io::RgbImage img = dataset_image(d, i);
    const auto input_path = dir / ("sample" + std::to_string(i) + "_input.png");
    io::write_png(input_path, img);
    written.push_back(input_path);
    for (const auto& m : maps) {
      const auto path = dir / ("sample" + std::to_string(i) + "_tap" + std::to_string(m.layer) + ".png");
      io::write_png(path, overlay(img, m.resized.data()));
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace reff::harness
