#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

#include "reff/nn/classifier.hpp"
#include "reff/tensor.hpp"

namespace reff {

/// How gradients of the explanation flow back into the network.
///  Detached: channel weights and the L1 normalizer are constants; gradients
///            reach the parameters only through the feature maps.
///  Full:     true second-order differentiation through the weights and the
///            normalizer. Requires a HigherOrder tape.
enum class DiffMode { Detached, Full };

/// Scalar whose gradient with respect to the feature maps weights the channels.
enum class CamTarget { Logit, Probability };

inline std::string to_string(CamTarget t) { return t == CamTarget::Logit ? "logit" : "probability"; }

struct CamOptions {
  DiffMode mode = DiffMode::Detached;
  CamTarget target = CamTarget::Logit;
};

template <class T>
struct ExplanationMap {
  int layer = 0;
  Tensor<T> raw;         // (B, 1, h, w), >= 0
  Tensor<T> normalized;  // (B, 1, h, w), each sample sums to 1 or is all zero
  Tensor<T> resized;     // (B, 1, H, W)
};

namespace detail {
template <class T>
Tensor<T> class_score(const Tensor<T>& logits, std::span<const int> labels, CamTarget target) {
  return target == CamTarget::Logit ? sum(pick(logits, labels)) : sum(pick(softmax(logits), labels));
}
}  // namespace detail

/// Channel weights for several tapped maps at once: alpha_k = mean over (i, j)
/// of d score / d A_{k,i,j}, per sample. Returns (B, K) tensors, one per map.
/// The scoring pass only reads gradients; nothing is accumulated elsewhere.
template <class T>
std::vector<Tensor<T>> compute_alphas(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels,
                                      std::span<const Tensor<T>> feature_maps, CamOptions opt = {}) {
  for (const auto& a : feature_maps) {
    if (!a.tracked() || a.tape() != &tape) throw TapeError("compute_alpha: feature map is not on the tape");
    if (a.rank() != 4 || a.dim(0) != labels.size())
      throw ShapeError("compute_alpha: feature map " + to_string(a.shape()) + " does not match batch of " +
                       std::to_string(labels.size()));
  }
  if (feature_maps.empty()) return {};
  const bool full = opt.mode == DiffMode::Full;
  if (full && tape.mode() != TapeMode::HigherOrder) throw TapeError("compute_alpha: Full mode needs a HigherOrder tape");
  if (!logits.tracked() || logits.tape() != &tape) throw TapeError("compute_alpha: logits are not on the tape");
  Tensor<T> score = detail::class_score(logits, labels, opt.target);
  std::vector<Tensor<T>> grads = tape.grad(score, feature_maps, full);
  std::vector<Tensor<T>> alphas;
  alphas.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& a = feature_maps[i];
    const T inv = T(1) / static_cast<T>(a.dim(2) * a.dim(3));
    alphas.push_back(scale(reshape(sum_axes(grads[i], {2, 3}), {a.dim(0), a.dim(1)}), inv));
  }
  return alphas;
}

template <class T>
Tensor<T> compute_alpha(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels,
                        const Tensor<T>& feature_map, CamOptions opt = {}) {
  std::vector<Tensor<T>> maps{feature_map};
  return compute_alphas(tape, logits, labels, std::span<const Tensor<T>>(maps), opt)[0];
}

/// relu(sum_k alpha_k A_k): (B, K, h, w), (B, K) -> (B, 1, h, w).
template <class T>
Tensor<T> compute_cam(const Tensor<T>& feature_map, const Tensor<T>& alpha) {
  if (feature_map.rank() != 4 || alpha.rank() != 2 || alpha.dim(0) != feature_map.dim(0) ||
      alpha.dim(1) != feature_map.dim(1))
    throw ShapeError("compute_cam: weights " + to_string(alpha.shape()) + " do not match feature map " +
                     to_string(feature_map.shape()));
  Tensor<T> w = expand(reshape(alpha, {alpha.dim(0), alpha.dim(1), 1, 1}), feature_map.shape());
  return relu(sum_axes(mul(feature_map, w), {1}));
}

/// Per-sample division by the L1 norm; an all-zero map stays zero.
template <class T>
Tensor<T> normalize_cam(const Tensor<T>& cam, bool detach_norm = false) {
  if (cam.rank() != 4) throw ShapeError("normalize_cam: expected (B, 1, h, w), got " + to_string(cam.shape()));
  for (T v : cam.data())
    if (v < T(0)) throw ValueError("normalize_cam: negative entry " + std::to_string(v));
  Tensor<T> norm = sum_axes(cam, {1, 2, 3});
  // Adding 1 where the norm vanishes leaves 0 / 1 = 0 there and changes nothing elsewhere.
  Tensor<T> guard(norm.shape());
  for (std::size_t b = 0; b < norm.size(); ++b) guard.mutable_data()[b] = norm[b] == T(0) ? T(1) : T(0);
  Tensor<T> denom = add(detach_norm ? norm.detach() : norm, guard);
  return div(cam, expand(denom, cam.shape()));
}

template <class T>
Tensor<T> resize_cam(const Tensor<T>& cam, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ShapeError("resize_cam: zero-size target");
  if (cam.rank() != 4) throw ShapeError("resize_cam: expected (B, 1, h, w), got " + to_string(cam.shape()));
  if (height < cam.dim(2) || width < cam.dim(3))
    throw ShapeError("resize_cam: target " + std::to_string(height) + "x" + std::to_string(width) +
                     " smaller than source " + to_string(cam.shape()));
  return bilinear_resize2d(cam, height, width);
}

/// Explanations for every requested tap of a forward pass recorded on `tape`.
/// `labels` is the ground-truth class during training and the predicted class
/// for visualization.
template <class T>
std::vector<ExplanationMap<T>> explain_output(Tape<T>& tape, const nn::ClassifierOutput<T>& out,
                                              std::span<const int> labels, const std::set<int>& taps,
                                              std::size_t height, std::size_t width, CamOptions opt = {}) {
  std::vector<Tensor<T>> maps;
  std::vector<int> layers;
  for (int l : taps) {
    maps.push_back(out.tap(l));
    layers.push_back(l);
  }
  if (maps.empty()) return {};
  auto alphas = compute_alphas(tape, out.logits, labels, std::span<const Tensor<T>>(maps), opt);
  const bool detached = opt.mode == DiffMode::Detached;
  std::vector<ExplanationMap<T>> result;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    ExplanationMap<T> e;
    e.layer = layers[i];
    e.raw = compute_cam(maps[i], detached ? alphas[i].detach() : alphas[i]);
    e.normalized = normalize_cam(e.raw, detached);
    e.resized = resize_cam(e.normalized, height, width);
    result.push_back(std::move(e));
  }
  return result;
}

/// Stand-alone explanation of `x` (B, C, H, W) with untracked network
/// parameters; maps are returned detached.
template <class T>
std::vector<ExplanationMap<T>> explain(const nn::ClassifierNet<T>& net, const Tensor<T>& x, std::span<const int> labels,
                                       const std::set<int>& taps, CamOptions opt = {}) {
  if (taps.empty()) return {};
  Tape<T> tape(opt.mode == DiffMode::Full ? TapeMode::HigherOrder : TapeMode::FirstOrder);
  Tensor<T> xv = tape.variable(x);
  auto out = net.forward(xv);
  auto maps = explain_output(tape, out, labels, taps, x.dim(2), x.dim(3), opt);
  for (auto& m : maps) {
    m.raw = m.raw.detach();
    m.normalized = m.normalized.detach();
    m.resized = m.resized.detach();
  }
  return maps;
}

/// Predicted classes (argmax of logits, first index on ties).
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  std::vector<int> out(logits.dim(0));
  const std::size_t c = logits.dim(1);
  for (std::size_t b = 0; b < out.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[b * c + j] > logits[b * c + best]) best = j;
    out[b] = static_cast<int>(best);
  }
  return out;
}

}  // namespace reff
