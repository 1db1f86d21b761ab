#pragma once

#include <span>
#include <vector>

#include "reff/data/dataset.hpp"
#include "reff/regularizer.hpp"

namespace reff::harness {

/// Regional annotation per training sample: the manual mask for annotated
/// samples, a stored pseudo-annotation otherwise. Masks are plain tensors, so
/// nothing downstream can send gradients into whatever produced them.
class MaskProvider {
 public:
  MaskProvider() = default;

  /// Every sample annotated.
  static MaskProvider manual(const data::Dataset& d) {
    MaskProvider p;
    p.data_ = &d;
    p.manual_.assign(d.size(), 1);
    return p;
  }

  /// `annotated` get their manual masks; all others read `pseudo` (N x H x W
  /// values in [0, 1]). With `binarize`, pseudo masks are thresholded at 0.5.
  static MaskProvider mixed(const data::Dataset& d, std::span<const std::size_t> annotated, std::vector<float> pseudo,
                            bool binarize = false) {
    MaskProvider p;
    p.data_ = &d;
    p.manual_.assign(d.size(), 0);
    for (std::size_t i : annotated) p.manual_.at(i) = 1;
    const bool need_pseudo = annotated.size() < d.size();
    if (need_pseudo && pseudo.size() != d.size() * d.pixels())
      throw ConfigError("mask provider: pseudo-annotations required for " + std::to_string(d.size() - annotated.size()) +
                        " unannotated samples");
    for (float& v : pseudo) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("mask provider: pseudo-annotation outside [0, 1]");
      if (binarize) v = v >= 0.5f ? 1.0f : 0.0f;
    }
    p.pseudo_ = std::move(pseudo);
    return p;
  }

  bool present() const noexcept { return data_ != nullptr; }
  MaskSource source(std::size_t i) const { return manual_.at(i) ? MaskSource::Manual : MaskSource::Pseudo; }
  std::size_t manual_count() const {
    std::size_t n = 0;
    for (char m : manual_) n += m != 0;
    return n;
  }

  /// (B, 1, H, W) masks for dataset indices `idx`.
  template <class T = float>
  Tensor<T> batch(std::span<const std::size_t> idx) const {
    const std::size_t n = data_->pixels();
    Tensor<T> out({idx.size(), 1, data_->height, data_->width});
    auto d = out.mutable_data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::size_t i = idx[b];
      if (manual_.at(i))
        for (std::size_t j = 0; j < n; ++j) d[b * n + j] = static_cast<T>(data_->masks[i * n + j]);
      else
        for (std::size_t j = 0; j < n; ++j) d[b * n + j] = static_cast<T>(pseudo_[i * n + j]);
    }
    return out;
  }

 private:
  const data::Dataset* data_ = nullptr;
  std::vector<char> manual_;
  std::vector<float> pseudo_;
};

}  // namespace reff::harness
