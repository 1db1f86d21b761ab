#pragma once

#include <map>
#include <string>
#include <vector>

#include "reff/gradcam.hpp"

namespace reff {

enum class Variant { Reff, L1, L2 };
enum class MaskSource { Manual, Pseudo };
/// Sum: squared norm over mask pixels. PixelMean: the same divided by H * W.
enum class Reduction { Sum, PixelMean };

struct ReffConfig {
  double lambda = 1.0;
  /// Weight per tapped layer (1-based layer id).
  std::map<int, double> weights{{1, 15.0}, {2, 60.0}, {3, 250.0}, {4, 1000.0}};
  Variant variant = Variant::Reff;
  DiffMode diff_mode = DiffMode::Detached;
  Reduction reduction = Reduction::Sum;
  /// Score differentiated for alpha: the label's logit or its softmax probability.
  CamTarget target = CamTarget::Logit;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("reff.lambda must be >= 0");
    for (auto [l, w] : weights)
      if (!(w >= 0.0)) throw ConfigError("reff.weights: weight of layer " + std::to_string(l) + " must be >= 0");
  }

  std::set<int> taps() const {
    std::set<int> t;
    for (auto [l, w] : weights) t.insert(l);
    return t;
  }
};

/// Coefficient used by the L1/L2 variants.
inline constexpr double kVariantLambda = 1e-6;

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Reff: return "reff";
    case Variant::L1: return "l1";
    case Variant::L2: return "l2";
  }
  return "?";
}

inline std::string to_string(DiffMode m) { return m == DiffMode::Full ? "full" : "detached"; }
inline std::string to_string(Reduction r) { return r == Reduction::Sum ? "sum" : "pixel_mean"; }

namespace detail {

template <class T>
void check_mask(const char* op, const Tensor<T>& mask, const std::vector<ExplanationMap<T>>& maps) {
  if (mask.rank() != 4 || mask.dim(1) != 1)
    throw ShapeError(std::string(op) + ": mask must be (B, 1, H, W), got " + to_string(mask.shape()));
  for (T v : mask.data())
    if (!(v >= T(0) && v <= T(1)))
      throw ValueError(std::string(op) + ": mask entry " + std::to_string(v) + " outside [0, 1]");
  for (const auto& m : maps)
    if (m.resized.shape() != mask.shape())
      throw ShapeError(std::string(op) + ": explanation of layer " + std::to_string(m.layer) + " is " +
                       to_string(m.resized.shape()) + " but the mask is " + to_string(mask.shape()));
}

template <class T>
T layer_weight(const std::map<int, double>& w, int layer) {
  auto it = w.find(layer);
  return it == w.end() ? T(0) : static_cast<T>(it->second);
}

/// 1 / B, or 1 / (B H W) for the pixel-mean reduction.
template <class T>
T reduction_scale(const Tensor<T>& mask, Reduction r) {
  double n = static_cast<double>(mask.dim(0));
  if (r == Reduction::PixelMean) n *= static_cast<double>(mask.dim(2) * mask.dim(3));
  return static_cast<T>(1.0 / n);
}

template <class T>
Tensor<T> masked_norm_term(const std::vector<ExplanationMap<T>>& maps, const Tensor<T>& mask, const ReffConfig& cfg) {
  Tensor<T> outside = add_scalar(neg(mask.detach()), T(1));
  Tensor<T> total = Tensor<T>::scalar(T(0));
  const T inv_batch = reduction_scale(mask, cfg.reduction);
  for (const auto& m : maps) {
    const T w = layer_weight<T>(cfg.weights, m.layer);
    if (w == T(0)) continue;
    total = add(total, scale(sum(square(mul(m.resized, outside))), w * inv_batch));
  }
  return total;
}

}  // namespace detail

/// sum_l w_l || resized(I'_l) * (1 - s) ||_2^2, averaged over the batch.
/// `mask` is (B, 1, H, W) and always enters as a constant.
template <class T>
Tensor<T> reff_term(const std::vector<ExplanationMap<T>>& maps, const Tensor<T>& mask, const ReffConfig& cfg) {
  detail::check_mask("reff_term", mask, maps);
  return detail::masked_norm_term(maps, mask, cfg);
}

/// Same penalty with a pseudo-annotator output substituted for the mask. No
/// gradient reaches the annotator.
template <class T>
Tensor<T> reff_term_pseudo(const std::vector<ExplanationMap<T>>& maps, const Tensor<T>& pseudo_mask,
                           const ReffConfig& cfg) {
  detail::check_mask("reff_term_pseudo", pseudo_mask, maps);
  return detail::masked_norm_term(maps, pseudo_mask.detach(), cfg);
}

/// L1: sum_l w_l ||resized(I'_l) - s||_1;  L2: sum_l w_l ||resized(I'_l) - s||_2^2.
/// Explanations are brought to the mask resolution, batch-averaged.
template <class T>
Tensor<T> variant_term(const std::vector<ExplanationMap<T>>& maps, const Tensor<T>& mask, const ReffConfig& cfg) {
  if (cfg.variant == Variant::Reff) throw ConfigError("variant_term: variant must be l1 or l2");
  detail::check_mask("variant_term", mask, maps);
  const Tensor<T> target = mask.detach();
  Tensor<T> total = Tensor<T>::scalar(T(0));
  const T inv_batch = detail::reduction_scale(mask, cfg.reduction);
  for (const auto& m : maps) {
    const T w = detail::layer_weight<T>(cfg.weights, m.layer);
    if (w == T(0)) continue;
    Tensor<T> diff = sub(m.resized, target);
    Tensor<T> norm = cfg.variant == Variant::L1 ? sum(add(relu(diff), relu(neg(diff)))) : sum(square(diff));
    total = add(total, scale(norm, w * inv_batch));
  }
  return total;
}

/// Dispatches on the configured variant.
template <class T>
Tensor<T> regularizer_term(const std::vector<ExplanationMap<T>>& maps, const Tensor<T>& mask, const ReffConfig& cfg) {
  return cfg.variant == Variant::Reff ? reff_term(maps, mask, cfg) : variant_term(maps, mask, cfg);
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& main, const Tensor<T>& reg, double lambda) {
  if (lambda == 0.0) return main;
  return add(main, scale(reg, static_cast<T>(lambda)));
}

}  // namespace reff
