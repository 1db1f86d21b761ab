#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "reff/data/dataset.hpp"
#include "reff/gradcam.hpp"
#include "reff/harness/masks.hpp"
#include "reff/nn/classifier.hpp"
#include "reff/nn/loss.hpp"
#include "reff/nn/optim.hpp"
#include "reff/regularizer.hpp"

namespace reff::harness {

enum class RegMode { Off, Reff, L1, L2 };

inline std::string to_string(RegMode m) {
  switch (m) {
    case RegMode::Off: return "off";
    case RegMode::Reff: return "reff";
    case RegMode::L1: return "l1";
    case RegMode::L2: return "l2";
  }
  return "?";
}

inline RegMode parse_reg_mode(const std::string& s) {
  if (s == "off") return RegMode::Off;
  if (s == "reff") return RegMode::Reff;
  if (s == "l1") return RegMode::L1;
  if (s == "l2") return RegMode::L2;
  throw ConfigError("reff.variant must be off, reff, l1 or l2, got '" + s + "'");
}

struct TrainConfig {
  nn::ClassifierConfig model;
  nn::OptimizerConfig optimizer = nn::MomentumSgdConfig{};
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double val_fraction = 0.1;
  /// Rescale the global gradient norm to at most this value; 0 disables.
  double clip_norm = 0.0;
  RegMode reg = RegMode::Off;
  ReffConfig reff;
  std::uint64_t seed = 0;

  bool regularized() const { return reg != RegMode::Off && reff.lambda != 0.0; }

  ReffConfig effective_reff() const {
    ReffConfig r = reff;
    r.variant = reg == RegMode::L1 ? Variant::L1 : reg == RegMode::L2 ? Variant::L2 : Variant::Reff;
    return r;
  }
};

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;
  double accuracy = 0;   // percent
  double main_loss = 0;  // mean over batches (train) or samples (val)
  double reff_loss = 0;
  double wall_time = 0;  // seconds since training started
  std::uint64_t seed = 0;
};

struct TrainResult {
  nn::ClassifierNet<float> net;
  std::vector<MetricsRecord> metrics;
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1;
};

/// Deterministic 90/10-style split of [0, n): (train, val).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_val_split(std::size_t n, double val_fraction,
                                                                                    std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, 0x7661);
  rng.shuffle(idx.begin(), idx.end());
  const auto nval = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
  return {train, val};
}

/// Top-1 accuracy in percent over `idx` (all samples when empty).
inline double evaluate(const nn::ClassifierNet<float>& net, const data::Dataset& d,
                       std::vector<std::size_t> idx = {}, double* mean_loss = nullptr) {
  if (idx.empty()) {
    idx.resize(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  if (idx.empty()) throw ValueError("evaluate: empty dataset");
  std::size_t correct = 0;
  double loss = 0;
  const std::size_t chunk = 100;
  for (std::size_t s = 0; s < idx.size(); s += chunk) {
    std::span<const std::size_t> b(idx.data() + s, std::min(chunk, idx.size() - s));
    auto out = net.forward(d.image_batch(b));
    const auto labels = d.label_batch(b);
    const auto pred = argmax_rows(out.logits);
    for (std::size_t i = 0; i < b.size(); ++i) correct += pred[i] == labels[i];
    if (mean_loss) loss += nn::cross_entropy(out.logits, std::span<const int>(labels)).item() * static_cast<double>(b.size());
  }
  if (mean_loss) *mean_loss = loss / static_cast<double>(idx.size());
  return 100.0 * static_cast<double>(correct) / static_cast<double>(idx.size());
}

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Mini-batch training with optional explanation regularization. The model
/// with the best validation accuracy (first on ties) is returned.
inline TrainResult train_classifier(const TrainConfig& cfg, const data::Dataset& train_set,
                                    const MaskProvider* masks = nullptr, const MetricsSink& sink = {}) {
  cfg.reff.validate();
  if (train_set.size() == 0) throw ValueError("train: empty training set");
  if (cfg.batch == 0) throw ConfigError("train.batch must be positive");
  const bool reg = cfg.regularized();
  const ReffConfig rcfg = cfg.effective_reff();
  if (reg && (!masks || !masks->present())) throw ConfigError("train: regularizer enabled but no masks available");

  const auto clock0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock0).count(); };

  TrainResult res;
  res.net = nn::ClassifierNet<float>(cfg.model, splitmix64(cfg.seed ^ 0x6e6574));
  auto params = res.net.parameters();
  nn::Optimizer<float> opt(cfg.optimizer);
  auto [train_idx, val_idx] = train_val_split(train_set.size(), cfg.val_fraction, cfg.seed);
  std::vector<Tensor<float>> best;

  const std::size_t H = train_set.height, W = train_set.width;
  const TapeMode tmode = reg && rcfg.diff_mode == DiffMode::Full ? TapeMode::HigherOrder : TapeMode::FirstOrder;
  const CamOptions cam{rcfg.diff_mode, rcfg.target};

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng rng = Rng::stream(cfg.seed, epoch);
    rng.shuffle(order.begin(), order.end());
    double sum_main = 0, sum_reg = 0;
    std::size_t batches = 0, correct = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch, order.size() - s));
      const Tensor<float> x = train_set.image_batch(idx);
      const std::vector<int> y = train_set.label_batch(idx);
      std::span<const int> labels(y);

      Tape<float> tape(tmode);
      nn::Bound<float> bound(params, tape);
      auto out = res.net.forward(x);
      Tensor<float> main = nn::cross_entropy(out.logits, labels);
      Tensor<float> loss = main;
      double reg_value = 0;
      if (reg) {
        auto maps = explain_output(tape, out, labels, rcfg.taps(), H, W, cam);
        Tensor<float> r = regularizer_term(maps, masks->batch(idx), rcfg);
        reg_value = r.item();
        loss = total_loss(main, r, rcfg.lambda);
      }
      if (!std::isfinite(loss.item())) {
        std::ostringstream os;
        os << "train: non-finite loss at epoch " << epoch << " step " << batches << " (main " << main.item() << ", reg "
           << reg_value << ", lambda " << rcfg.lambda << ", lr "
           << std::visit([](const auto& o) { return o.lr; }, cfg.optimizer) << ")";
        throw NumericError(os.str());
      }
      auto grads = tape.grad(loss, std::span<const Tensor<float>>(bound.tracked()), false);
      double norm2 = 0;
      for (const auto& g : grads)
        for (float v : g.data()) norm2 += static_cast<double>(v) * v;
      if (!std::isfinite(norm2))
        throw NumericError("train: non-finite gradient at epoch " + std::to_string(epoch) + " step " + std::to_string(batches));
      if (cfg.clip_norm > 0 && norm2 > cfg.clip_norm * cfg.clip_norm) {
        const auto scale = static_cast<float>(cfg.clip_norm / std::sqrt(norm2));
        for (auto& g : grads)
          for (float& v : g.mutable_data()) v *= scale;
      }
      const auto pred = argmax_rows(out.logits);
      for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
      sum_main += main.item();
      sum_reg += reg_value;
      ++batches;
      opt.step(params, grads);
    }

    MetricsRecord tr{epoch, "train", 100.0 * static_cast<double>(correct) / static_cast<double>(order.size()),
                     sum_main / static_cast<double>(batches), sum_reg / static_cast<double>(batches), elapsed(), cfg.seed};
    res.metrics.push_back(tr);
    if (sink) sink(tr);

    MetricsRecord va{epoch, "val", 0, 0, 0, 0, cfg.seed};
    if (!val_idx.empty()) va.accuracy = evaluate(res.net, train_set, val_idx, &va.main_loss);
    va.wall_time = elapsed();
    res.metrics.push_back(va);
    if (sink) sink(va);

    if (va.accuracy > res.best_val_accuracy) {
      res.best_val_accuracy = va.accuracy;
      res.best_epoch = epoch;
      best.clear();
      for (auto& p : params) best.push_back(p.value->clone());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = best[i];
  return res;
}

}  // namespace reff::harness
