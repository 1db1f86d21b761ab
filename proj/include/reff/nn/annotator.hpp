#pragma once

#include <string>
#include <vector>

#include "reff/nn/layers.hpp"

namespace reff::nn {

struct AnnotatorConfig {
  std::size_t in_channels = 3;
  /// Encoder widths, one per resolution level; each level but the last is
  /// followed by a 2x downsampling.
  std::vector<std::size_t> widths{8, 16, 32, 32};
};

/// Encoder-decoder with channel-concat skip connections. Decoder levels
/// upsample by nearest neighbour followed by a 3x3 conv. Output: one sigmoid
/// channel at input resolution.
template <class T>
class AnnotatorNet {
 public:
  AnnotatorNet() = default;
  AnnotatorNet(AnnotatorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.widths.size() < 2) throw ConfigError("annotator: need at least two levels");
    Rng rng(seed);
    std::size_t in = cfg_.in_channels;
    for (std::size_t w : cfg_.widths) {
      enc_.emplace_back(in, w, 3, Conv2dParams{1, 1}, rng);
      in = w;
    }
    for (std::size_t l = cfg_.widths.size() - 1; l-- > 0;) {
      const std::size_t skip = cfg_.widths[l];
      up_.emplace_back(in, skip, 3, Conv2dParams{1, 1}, rng);
      fuse_.emplace_back(2 * skip, skip, 3, Conv2dParams{1, 1}, rng);
      in = skip;
    }
    out_ = Conv2d<T>(in, 1, 1, Conv2dParams{1, 0}, rng);
  }

  const AnnotatorConfig& config() const { return cfg_; }

  /// Pre-sigmoid logits (B, 1, H, W).
  Tensor<T> logits(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
      throw ShapeError("annotator: expected (B, " + std::to_string(cfg_.in_channels) + ", H, W), got " +
                       to_string(x.shape()));
    const std::size_t f = std::size_t{1} << (cfg_.widths.size() - 1);
    if (x.dim(2) % f || x.dim(3) % f)
      throw ShapeError("annotator: spatial extent " + to_string(x.shape()) + " not divisible by " + std::to_string(f));
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      if (l > 0) h = max_pool2d(h, 2);
      h = relu(enc_[l](h));
      skips.push_back(h);
    }
    for (std::size_t d = 0; d < up_.size(); ++d) {
      const Tensor<T>& skip = skips[skips.size() - 2 - d];
      h = relu(up_[d](upsample_nearest2d(h, 2)));
      h = relu(fuse_[d](concat(h, skip, 1)));
    }
    return out_(h);
  }

  /// Soft mask in [0, 1], shape (B, 1, H, W).
  Tensor<T> forward(const Tensor<T>& x) const { return sigmoid(logits(x)); }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> p;
    for (std::size_t i = 0; i < enc_.size(); ++i) enc_[i].parameters("enc" + std::to_string(i + 1), p);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      up_[i].parameters("up" + std::to_string(i + 1), p);
      fuse_[i].parameters("fuse" + std::to_string(i + 1), p);
    }
    out_.parameters("out", p);
    return p;
  }

 private:
  AnnotatorConfig cfg_;
  std::vector<Conv2d<T>> enc_, up_, fuse_;
  Conv2d<T> out_;
};

/// Five-layer patch discriminator over (image, mask) pairs. Output channels
/// 64, 128, 256, 512, 1; 4x4 kernels, the first three with stride 2.
template <class T>
class PatchDiscriminator {
 public:
  PatchDiscriminator() = default;
  PatchDiscriminator(std::size_t image_channels, std::uint64_t seed,
                     std::vector<std::size_t> channels = {64, 128, 256, 512, 1}) {
    if (channels.size() != 5) throw ConfigError("discriminator: expected five layer widths");
    Rng rng(seed);
    std::size_t in = image_channels + 1;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const Conv2dParams p = i < 3 ? Conv2dParams{2, 1} : Conv2dParams{1, 1};
      layers_.emplace_back(in, channels[i], 4, p, rng);
      in = channels[i];
    }
  }

  const std::vector<Conv2d<T>>& layers() const { return layers_; }

  /// Real/fake logits map (B, 1, h, w).
  Tensor<T> forward(const Tensor<T>& image, const Tensor<T>& mask) const {
    Tensor<T> h = concat(image, mask, 1);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i](h);
      if (i + 1 < layers_.size()) h = leaky_relu(h, T(0.2));
    }
    return h;
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> p;
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].parameters("disc" + std::to_string(i + 1), p);
    return p;
  }

 private:
  std::vector<Conv2d<T>> layers_;
};

}  // namespace reff::nn
