#pragma once

#include <reff/rng.hpp>
#include <reff/tensor.hpp>

namespace reff::test {

template <class T = double>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Uniform in +-[margin, 1]: keeps every coordinate away from relu kinks.
inline Tensor<double> away_from_zero(Rng& rng, Shape shape, double margin = 1e-3) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_data()) {
    const double m = rng.uniform(margin, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

template <class T>
Tensor<T> tensor_of(Shape shape, std::vector<T> v) {
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace reff::test
