#pragma once

#include <cmath>
#include <cstdint>
#include <variant>
#include <vector>

#include "reff/nn/layers.hpp"

namespace reff::nn {

struct MomentumSgdConfig {
  double lr = 0.01;
  double momentum = 0.8;
  double weight_decay = 1e-5;
};

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using OptimizerConfig = std::variant<MomentumSgdConfig, AdamConfig>;

/// Holds per-parameter state buffers, indexed in parameter order.
template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return steps_; }
  std::vector<Tensor<T>>& state_a() { return first_; }
  std::vector<Tensor<T>>& state_b() { return second_; }

  /// Momentum SGD: v <- m v + g + wd p; p <- p - lr v.
  /// Adam: bias-corrected first/second moments; p <- p - lr mhat / (sqrt(vhat) + eps).
  void step(std::vector<ParamRef<T>>& params, const std::vector<Tensor<T>>& grads) {
    if (params.size() != grads.size()) throw ShapeError("optimizer: parameter and gradient counts differ");
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].value->shape() != grads[i].shape())
        throw ShapeError("optimizer: gradient " + to_string(grads[i].shape()) + " does not match parameter " +
                         params[i].name + " " + to_string(params[i].value->shape()));
    if (first_.empty()) {
      for (auto& p : params) {
        first_.emplace_back(p.value->shape());
        if (std::holds_alternative<AdamConfig>(cfg_)) second_.emplace_back(p.value->shape());
      }
    } else if (first_.size() != params.size()) {
      throw ShapeError("optimizer: parameter set changed between steps");
    }
    ++steps_;
    if (const auto* sgd = std::get_if<MomentumSgdConfig>(&cfg_)) {
      const T lr = static_cast<T>(sgd->lr), m = static_cast<T>(sgd->momentum), wd = static_cast<T>(sgd->weight_decay);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].value->mutable_data();
        auto v = first_[i].mutable_data();
        auto g = grads[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          v[j] = m * v[j] + g[j] + wd * p[j];
          p[j] -= lr * v[j];
        }
      }
    } else {
      const auto& a = std::get<AdamConfig>(cfg_);
      const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(steps_));
      const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(steps_));
      const T b1 = static_cast<T>(a.beta1), b2 = static_cast<T>(a.beta2);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].value->mutable_data();
        auto m = first_[i].mutable_data();
        auto v = second_[i].mutable_data();
        auto g = grads[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          m[j] = b1 * m[j] + (T(1) - b1) * g[j];
          v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
          const double mh = static_cast<double>(m[j]) / c1;
          const double vh = static_cast<double>(v[j]) / c2;
          p[j] = static_cast<T>(static_cast<double>(p[j]) - a.lr * mh / (std::sqrt(vh) + a.eps));
        }
      }
    }
  }

  void restore(std::uint64_t steps, std::vector<Tensor<T>> first, std::vector<Tensor<T>> second) {
    steps_ = steps;
    first_ = std::move(first);
    second_ = std::move(second);
  }

 private:
  OptimizerConfig cfg_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor<T>> first_, second_;
};

}  // namespace reff::nn
