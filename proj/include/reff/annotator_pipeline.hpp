#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reff/data/dataset.hpp"
#include "reff/harness/masks.hpp"
#include "reff/io/checkpoint.hpp"
#include "reff/nn/annotator.hpp"
#include "reff/nn/loss.hpp"
#include "reff/nn/optim.hpp"
#include "reff/parallel.hpp"

namespace reff::annot {

/// n_per_class value meaning "every training sample is annotated".
inline constexpr std::size_t kAll = std::numeric_limits<std::size_t>::max();

enum class AnnotatorLoss { BceL1, Adversarial };

struct AnnotatorTrainConfig {
  std::size_t n_per_class = 0;  // 0: no annotator, kAll: all samples annotated
  AnnotatorLoss loss = AnnotatorLoss::BceL1;
  double bce_weight = 1.0;
  double l1_weight = 10.0;
  double adv_weight = 1.0;  // only with AnnotatorLoss::Adversarial
  nn::AdamConfig adam;
  std::size_t batch = 4;
  std::size_t iterations = 3000;
  nn::AnnotatorConfig model;
  std::uint64_t seed = 0;
  bool binarize = false;  // threshold pseudo masks at 0.5 before use

  bool enabled() const { return n_per_class != 0; }
  void validate() const {
    if (batch == 0) throw ConfigError("annotator.batch must be positive");
    if (bce_weight < 0 || l1_weight < 0 || adv_weight < 0) throw ConfigError("annotator loss weights must be >= 0");
    if (adam.lr <= 0) throw ConfigError("annotator.lr must be positive");
  }
};

inline std::string n_per_class_string(std::size_t n) { return n == kAll ? "all" : std::to_string(n); }

inline std::size_t parse_n_per_class(const std::string& s) {
  if (s == "all" || s == "ALL") return kAll;
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos == s.size() && v >= 0) return static_cast<std::size_t>(v);
  } catch (...) {
  }
  throw ConfigError("n-per-class must be a non-negative integer or 'all', got '" + s + "'");
}

inline nlohmann::ordered_json config_json(const AnnotatorTrainConfig& c) {
  nlohmann::ordered_json j;
  j["n_per_class"] = n_per_class_string(c.n_per_class);
  j["loss"] = c.loss == AnnotatorLoss::BceL1 ? "bce_l1" : "adversarial";
  j["bce_weight"] = c.bce_weight;
  j["l1_weight"] = c.l1_weight;
  j["adv_weight"] = c.adv_weight;
  j["lr"] = c.adam.lr;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["batch"] = c.batch;
  j["iterations"] = c.iterations;
  j["widths"] = c.model.widths;
  j["seed"] = c.seed;
  j["binarize"] = c.binarize;
  return j;
}

inline AnnotatorTrainConfig annotator_config_from_json(const nlohmann::json& j) {
  AnnotatorTrainConfig c;
  try {
    c.n_per_class = parse_n_per_class(j.at("n_per_class").get<std::string>());
    const auto loss = j.at("loss").get<std::string>();
    if (loss != "bce_l1" && loss != "adversarial") throw ConfigError("annotator.loss must be bce_l1 or adversarial");
    c.loss = loss == "bce_l1" ? AnnotatorLoss::BceL1 : AnnotatorLoss::Adversarial;
    c.bce_weight = j.at("bce_weight");
    c.l1_weight = j.at("l1_weight");
    c.adv_weight = j.at("adv_weight");
    c.adam.lr = j.at("lr");
    c.adam.beta1 = j.at("beta1");
    c.adam.beta2 = j.at("beta2");
    c.batch = j.at("batch");
    c.iterations = j.at("iterations");
    c.model.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.seed = j.at("seed");
    c.binarize = j.at("binarize");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("annotator config: ") + e.what());
  }
  return c;
}

/// Exactly n indices per class, drawn uniformly without replacement; sorted.
inline std::vector<std::size_t> select_annotated_subset(const data::Dataset& d, std::size_t n_per_class,
                                                        std::uint64_t seed) {
  std::vector<std::size_t> out;
  if (n_per_class == kAll) {
    out.resize(d.size());
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);
  for (int c = 0; c < static_cast<int>(d.cfg.num_classes); ++c) {
    auto& pool = by_class[c];
    if (pool.size() < n_per_class)
      throw ValueError("annotated subset: class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                       " samples, need " + std::to_string(n_per_class));
    Rng rng = Rng::stream(seed ^ 0x616e6e, static_cast<std::uint64_t>(c));
    rng.shuffle(pool.begin(), pool.end());
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_per_class));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Trained pseudo-annotator plus the resolution it was trained at.
struct Annotator {
  nn::AnnotatorNet<float> net;
  AnnotatorTrainConfig cfg;
  std::size_t height = 0, width = 0;
  std::vector<double> bce_history;   // batch BCE before each update
  std::vector<double> loss_history;  // full objective before each update
  double train_bce = 0;             // mean pixelwise BCE over the training pairs after training
};

inline Tensor<float> annotate(const Annotator& g, const Tensor<float>& x);

/// Mean pixelwise BCE of the annotator over dataset indices `idx`.
inline double mean_bce(const Annotator& g, const data::Dataset& d, std::span<const std::size_t> idx) {
  double total = 0;
  for (std::size_t s = 0; s < idx.size(); s += 16) {
    auto b = idx.subspan(s, std::min<std::size_t>(16, idx.size() - s));
    total += nn::bce_with_logits(g.net.logits(d.image_batch(b)), d.mask_batch(b)).item() * static_cast<double>(b.size());
  }
  return total / static_cast<double>(idx.size());
}

using AnnotatorProgress = std::function<void(std::size_t iteration, double bce)>;

/// Fits G on (image, manual mask) pairs from `d` at indices `pairs`.
/// Deterministic for a fixed cfg.seed (single-threaded).
inline Annotator train_annotator(const data::Dataset& d, std::span<const std::size_t> pairs,
                                 const AnnotatorTrainConfig& cfg, const AnnotatorProgress& progress = {}) {
  cfg.validate();
  if (pairs.empty()) throw ValueError("train_annotator: no annotated pairs");
  Annotator g;
  g.cfg = cfg;
  g.height = d.height;
  g.width = d.width;
  g.net = nn::AnnotatorNet<float>(cfg.model, splitmix64(cfg.seed ^ 0x47));
  auto params = g.net.parameters();
  nn::Optimizer<float> opt(cfg.adam);

  const bool adversarial = cfg.loss == AnnotatorLoss::Adversarial;
  nn::PatchDiscriminator<float> disc;
  std::vector<nn::ParamRef<float>> dparams;
  std::optional<nn::Optimizer<float>> dopt;
  if (adversarial) {
    disc = nn::PatchDiscriminator<float>(3, splitmix64(cfg.seed ^ 0x44));
    dparams = disc.parameters();
    dopt.emplace(cfg.adam);
  }
  auto bce_const = [](const Tensor<float>& logits, float target) {
    return nn::bce_with_logits(logits, Tensor<float>(logits.shape(), target));
  };

  Rng rng = Rng::stream(cfg.seed, 0x7472);
  std::vector<std::size_t> batch(cfg.batch);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (auto& b : batch) b = pairs[rng.below(pairs.size())];
    const Tensor<float> x = d.image_batch(std::span<const std::size_t>(batch));
    const Tensor<float> s = d.mask_batch(std::span<const std::size_t>(batch));

    Tensor<float> fake;
    {
      Tape<float> tape(TapeMode::FirstOrder);
      nn::Bound<float> bound(params, tape);
      const Tensor<float> z = g.net.logits(x);
      const Tensor<float> bce = nn::bce_with_logits(z, s);
      const Tensor<float> m = sigmoid(z);
      Tensor<float> loss = add(scale(bce, static_cast<float>(cfg.bce_weight)),
                               scale(nn::l1_loss(m, s), static_cast<float>(cfg.l1_weight)));
      if (adversarial) loss = add(loss, scale(bce_const(disc.forward(x, m), 1.0f), static_cast<float>(cfg.adv_weight)));
      g.bce_history.push_back(bce.item());
      g.loss_history.push_back(loss.item());
      if (!std::isfinite(loss.item()))
        throw NumericError("train_annotator: non-finite loss at iteration " + std::to_string(it));
      auto grads = tape.grad(loss, std::span<const Tensor<float>>(bound.tracked()), false);
      fake = m.detach();
      opt.step(params, grads);
    }
    if (adversarial) {
      Tape<float> tape(TapeMode::FirstOrder);
      nn::Bound<float> bound(dparams, tape);
      Tensor<float> loss = scale(add(bce_const(disc.forward(x, s), 1.0f), bce_const(disc.forward(x, fake), 0.0f)), 0.5f);
      auto grads = tape.grad(loss, std::span<const Tensor<float>>(bound.tracked()), false);
      dopt->step(dparams, grads);
    }
    if (progress) progress(it, g.bce_history.back());
  }
  g.train_bce = mean_bce(g, d, pairs);
  return g;
}

/// Soft mask in [0, 1] of shape (B, 1, H, W), never attached to a tape.
inline Tensor<float> annotate(const Annotator& g, const Tensor<float>& x) {
  if (x.rank() != 4 || x.dim(2) != g.height || x.dim(3) != g.width)
    throw ShapeError("annotate: annotator trained at " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                     ", got input " + to_string(x.shape()));
  return g.net.forward(x.detach()).detach();
}

/// Pseudo masks for every sample (N * H * W floats), computed in parallel
/// chunks keyed by sample index.
inline std::vector<float> annotate_dataset(const Annotator& g, const data::Dataset& d,
                                           std::size_t threads = worker_count()) {
  const std::size_t n = d.pixels(), chunk = 32;
  std::vector<float> out(d.size() * n);
  parallel_for(
      (d.size() + chunk - 1) / chunk,
      [&](std::size_t c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = c * chunk; i < std::min(d.size(), (c + 1) * chunk); ++i) idx.push_back(i);
        const Tensor<float> m = annotate(g, d.image_batch(std::span<const std::size_t>(idx)));
        std::copy(m.data().begin(), m.data().end(), out.begin() + static_cast<std::ptrdiff_t>(idx.front() * n));
      },
      threads);
  return out;
}

/// Manual masks for `subset`, pseudo masks from G for everything else.
/// n = 0 means no provider (baseline). G is required unless the subset covers
/// the whole dataset.
inline std::optional<harness::MaskProvider> make_mask_provider(const data::Dataset& d, std::size_t n_per_class,
                                                               std::span<const std::size_t> subset,
                                                               const Annotator* g, bool binarize = false) {
  if (n_per_class == 0) return std::nullopt;
  if (subset.size() == d.size()) return harness::MaskProvider::manual(d);
  if (!g) throw ConfigError("mask provider: pseudo-annotator required for " + std::to_string(d.size() - subset.size()) +
                            " unannotated samples");
  return harness::MaskProvider::mixed(d, subset, annotate_dataset(*g, d), binarize);
}

/// Intersection over union of (pred > threshold) against (truth >= 0.5).
inline double iou(std::span<const float> pred, std::span<const float> truth, float threshold = 0.5f) {
  if (pred.size() != truth.size()) throw ShapeError("iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] > threshold, b = truth[i] >= 0.5f;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// IoU of G's thresholded output over dataset indices `idx`, pooled over pixels.
inline double dataset_iou(const Annotator& g, const data::Dataset& d, std::span<const std::size_t> idx) {
  const auto m = annotate(g, d.image_batch(idx));
  const auto s = d.mask_batch(idx);
  return iou(m.data(), s.data());
}

inline void save_annotator(const Annotator& g, const std::filesystem::path& path) {
  io::Checkpoint ck;
  auto params = const_cast<nn::AnnotatorNet<float>&>(g.net).parameters();
  io::put_parameters(ck, "annotator", params);
  nlohmann::ordered_json meta;
  meta["kind"] = "annotator";
  meta["config"] = config_json(g.cfg);
  meta["height"] = g.height;
  meta["width"] = g.width;
  meta["train_bce"] = g.train_bce;
  ck.set_meta(meta);
  ck.save(path);
}

inline Annotator load_annotator(const std::filesystem::path& path) {
  const auto ck = io::Checkpoint::load(path);
  const auto meta = ck.meta();
  if (meta.value("kind", "") != "annotator")
    throw FormatError(path.string() + ": not an annotator checkpoint (kind '" + meta.value("kind", "") + "')");
  Annotator g;
  g.cfg = annotator_config_from_json(meta.at("config"));
  g.height = meta.at("height");
  g.width = meta.at("width");
  g.train_bce = meta.value("train_bce", 0.0);
  g.net = nn::AnnotatorNet<float>(g.cfg.model, 0);
  auto params = g.net.parameters();
  io::get_parameters(ck, "annotator", params);
  return g;
}

}  // namespace reff::annot
