#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "reff/nn/layers.hpp"

namespace reff::nn {

struct ClassifierConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::size_t num_classes = 10;
  /// Blocks (1-based) whose outputs are exposed as feature maps.
  std::set<int> taps{1, 2, 3, 4};
};

template <class T>
struct TappedMap {
  int layer;
  Tensor<T> features;  // (B, K, H / 2^layer, W / 2^layer)
};

template <class T>
struct ClassifierOutput {
  Tensor<T> logits;  // (B, C)
  std::vector<TappedMap<T>> taps;

  const Tensor<T>& tap(int layer) const {
    for (const auto& t : taps)
      if (t.layer == layer) return t.features;
    throw ValueError("classifier: layer " + std::to_string(layer) + " is not tapped");
  }
};

/// Blocks conv3x3 -> relu -> maxpool2, global average pool, dense head.
template <class T>
class ClassifierNet {
 public:
  ClassifierNet() = default;
  ClassifierNet(ClassifierConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.widths.empty()) throw ConfigError("classifier: at least one block is required");
    for (int t : cfg_.taps)
      if (t < 1 || static_cast<std::size_t>(t) > cfg_.widths.size())
        throw ConfigError("classifier: tap " + std::to_string(t) + " outside 1.." + std::to_string(cfg_.widths.size()));
    Rng rng(seed);
    std::size_t in = cfg_.in_channels;
    for (std::size_t w : cfg_.widths) {
      blocks_.emplace_back(in, w, 3, Conv2dParams{1, 1}, rng);
      in = w;
    }
    head_ = Dense<T>(in, cfg_.num_classes, rng);
  }

  const ClassifierConfig& config() const { return cfg_; }
  std::size_t depth() const { return blocks_.size(); }

  ClassifierOutput<T> forward(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
      throw ShapeError("classifier: expected (B, " + std::to_string(cfg_.in_channels) + ", H, W), got " +
                       to_string(x.shape()));
    const std::size_t f = std::size_t{1} << blocks_.size();
    if (x.dim(2) % f || x.dim(3) % f)
      throw ShapeError("classifier: spatial extent " + to_string(x.shape()) + " not divisible by " + std::to_string(f));
    ClassifierOutput<T> out;
    Tensor<T> h = x;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      h = max_pool2d(relu(blocks_[i](h)), 2);
      if (cfg_.taps.count(static_cast<int>(i + 1))) out.taps.push_back({static_cast<int>(i + 1), h});
    }
    out.logits = head_(global_avg_pool(h));
    return out;
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> p;
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].parameters("block" + std::to_string(i + 1), p);
    head_.parameters("head", p);
    return p;
  }

  Dense<T>& head() { return head_; }

 private:
  ClassifierConfig cfg_;
  std::vector<Conv2d<T>> blocks_;
  Dense<T> head_;
};

}  // namespace reff::nn
