#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "reff/rng.hpp"
#include "reff/tensor.hpp"

namespace reff::nn {

/// Named parameter slot. Modules hand out pointers to their own tensors so a
/// training step can swap in tape-tracked aliases and restore them afterwards.
template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
};

/// Kaiming-uniform (fan-in, relu gain): U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
void kaiming_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : w.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
struct Conv2d {
  Tensor<T> weight, bias;
  Conv2dParams params;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, Conv2dParams p, Rng& rng)
      : weight({out, in, k, k}), bias({out}), params(p) {
    kaiming_uniform(weight, in * k * k, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_channel_bias(conv2d(x, weight, params), bias); }

  void parameters(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <class T>
struct Dense {
  Tensor<T> weight, bias;  // weight: (in, out)

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng) : weight({in, out}), bias({out}) {
    kaiming_uniform(weight, in, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_channel_bias(matmul(x, weight), bias); }

  void parameters(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return sub(relu(x), scale(relu(neg(x)), slope));
}

/// Global average pool (B, C, H, W) -> (B, C).
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const std::size_t hw = x.dim(2) * x.dim(3);
  return scale(reshape(sum_axes(x, {2, 3}), {x.dim(0), x.dim(1)}), T(1) / static_cast<T>(hw));
}

/// Replaces every parameter with a tape leaf sharing its storage; the returned
/// list holds the tracked tensors in parameter order. Undo with `release`.
template <class T>
std::vector<Tensor<T>> bind(std::vector<ParamRef<T>>& params, Tape<T>& tape) {
  std::vector<Tensor<T>> tracked;
  tracked.reserve(params.size());
  for (auto& p : params) {
    *p.value = tape.variable(*p.value);
    tracked.push_back(*p.value);
  }
  return tracked;
}

template <class T>
void release(std::vector<ParamRef<T>>& params) {
  for (auto& p : params) *p.value = p.value->detach();
}

template <class T>
std::size_t parameter_count(std::vector<ParamRef<T>> params) {
  std::size_t n = 0;
  for (auto& p : params) n += p.value->size();
  return n;
}

/// RAII form of bind/release.
template <class T>
class Bound {
 public:
  Bound(std::vector<ParamRef<T>> params, Tape<T>& tape) : params_(std::move(params)) {
    tracked_ = bind(params_, tape);
  }
  ~Bound() { release(params_); }
  Bound(const Bound&) = delete;
  Bound& operator=(const Bound&) = delete;

  const std::vector<Tensor<T>>& tracked() const { return tracked_; }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<Tensor<T>> tracked_;
};

}  // namespace reff::nn
