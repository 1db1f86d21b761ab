#pragma once

#include <span>

#include "reff/tensor.hpp"

namespace reff::nn {

/// Mean over the batch of -log softmax(logits)_y.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  return neg(mean(pick(log_softmax(logits), labels)));
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return add(relu(x), relu(neg(x)));
}

/// Mean pixelwise binary cross-entropy of sigmoid(z) against soft targets s,
/// evaluated stably as softplus(z) - z*s with softplus(z) = relu(z) + log(1 + exp(-|z|)).
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& z, const Tensor<T>& s) {
  Tensor<T> softplus = add(relu(z), log(add_scalar(exp(neg(abs(z))), T(1))));
  return mean(sub(softplus, mul(z, s)));
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(abs(sub(a, b)));
}

}  // namespace reff::nn
