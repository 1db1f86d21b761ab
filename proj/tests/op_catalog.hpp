#pragma once

// Finite-difference fixtures for every differentiable primitive. Shared by the
// unit tests and the acceptance suite.

#include <functional>
#include <string>
#include <vector>

#include <reff/grad_check.hpp>
#include <reff/tensor.hpp>

#include "test_util.hpp"

namespace reff::test {

struct OpCase {
  std::string name;
  /// Draws a fresh random instance: the point to differentiate at and the
  /// scalar function (a fixed random projection of the op output).
  std::function<std::pair<Tensor<double>, ScalarFn>(Rng&)> draw;
};

namespace detail_catalog {
using TD = Tensor<double>;

inline ScalarFn project(std::function<TD(const TD&)> op, const TD& probe, Rng& rng) {
  TD r = random_tensor(rng, op(probe).shape());
  return [op, r](const TD& x) { return sum(mul(op(x), r)); };
}

inline OpCase unary(std::string name, Shape shape, std::function<TD(const TD&)> op, double lo = -1, double hi = 1) {
  return {name, [=](Rng& rng) {
            TD x = random_tensor(rng, shape, lo, hi);
            return std::pair{x, project(op, x, rng)};
          }};
}

// Point drawn away from zero (relu kinks).
inline OpCase unary_nz(std::string name, Shape shape, std::function<TD(const TD&)> op) {
  return {name, [=](Rng& rng) {
            TD x = away_from_zero(rng, shape);
            return std::pair{x, project(op, x, rng)};
          }};
}

// Differentiates with respect to the first operand; the second is a fixed random tensor.
inline OpCase binary_first(std::string name, Shape sa, Shape sb, std::function<TD(const TD&, const TD&)> op,
                           double blo = -1, double bhi = 1) {
  return {name, [=](Rng& rng) {
            TD a = random_tensor(rng, sa);
            TD b = random_tensor(rng, sb, blo, bhi);
            auto f = [op, b](const TD& x) { return op(x, b); };
            return std::pair{a, project(f, a, rng)};
          }};
}

inline OpCase binary_second(std::string name, Shape sa, Shape sb, std::function<TD(const TD&, const TD&)> op,
                            double blo = -1, double bhi = 1) {
  return {name, [=](Rng& rng) {
            TD a = random_tensor(rng, sa);
            TD b = random_tensor(rng, sb, blo, bhi);
            auto f = [op, a](const TD& x) { return op(a, x); };
            return std::pair{b, project(f, b, rng)};
          }};
}
}  // namespace detail_catalog

inline std::vector<OpCase> op_catalog() {
  using namespace detail_catalog;
  const Conv2dParams p1{1, 1}, p2{2, 1};
  const Shape xs{2, 3, 6, 6}, ws{4, 3, 3, 3};
  const Shape ys1{2, 4, 6, 6}, ys2{2, 4, 3, 3};
  std::vector<OpCase> c;
  c.push_back(binary_first("add", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return add(a, b); }));
  c.push_back(binary_second("add[rhs]", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return add(a, b); }));
  c.push_back(binary_first("sub", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return sub(a, b); }));
  c.push_back(binary_second("sub[rhs]", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return sub(a, b); }));
  c.push_back(binary_first("mul", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return mul(a, b); }));
  c.push_back(binary_second("mul[rhs]", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return mul(a, b); }));
  c.push_back(binary_first("div", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return div(a, b); }, 0.5, 2.0));
  c.push_back(binary_second("div[rhs]", {3, 4}, {3, 4}, [](const TD& a, const TD& b) { return div(a, b); }, 0.5, 2.0));
  c.push_back(unary("neg", {5}, [](const TD& a) { return neg(a); }));
  c.push_back(unary("scale", {5}, [](const TD& a) { return scale(a, -2.5); }));
  c.push_back(unary("add_scalar", {5}, [](const TD& a) { return add_scalar(a, 0.7); }));
  c.push_back(unary("square", {5}, [](const TD& a) { return square(a); }));
  c.push_back(unary("exp", {5}, [](const TD& a) { return reff::exp(a); }));
  c.push_back(unary("log", {5}, [](const TD& a) { return reff::log(a); }, 0.2, 3.0));
  c.push_back(unary_nz("relu", {12}, [](const TD& a) { return relu(a); }));
  c.push_back(unary("sigmoid", {6}, [](const TD& a) { return sigmoid(a); }, -4, 4));
  c.push_back(unary("reshape", {2, 6}, [](const TD& a) { return reshape(a, {3, 4}); }));
  c.push_back(unary("sum_axes", {2, 3, 4}, [](const TD& a) { return sum_axes(a, {0, 2}); }));
  c.push_back(unary("expand", {2, 1, 3}, [](const TD& a) { return expand(a, {2, 4, 3}); }));
  c.push_back(unary("sum", {3, 3}, [](const TD& a) { return sum(a); }));
  c.push_back(unary("mean", {3, 3}, [](const TD& a) { return mean(a); }));
  c.push_back(unary("transpose2d", {3, 5}, [](const TD& a) { return transpose2d(a); }));
  c.push_back(binary_first("matmul", {3, 4}, {4, 2}, [](const TD& a, const TD& b) { return matmul(a, b); }));
  c.push_back(binary_second("matmul[rhs]", {3, 4}, {4, 2}, [](const TD& a, const TD& b) { return matmul(a, b); }));
  c.push_back(unary("slice", {2, 5, 3}, [](const TD& a) { return slice(a, 1, 1, 3); }));
  c.push_back(unary("pad_slice", {2, 2, 3}, [](const TD& a) { return pad_slice(a, 1, 2, 5); }));
  c.push_back(binary_first("concat", {2, 2, 3}, {2, 3, 3}, [](const TD& a, const TD& b) { return concat(a, b, 1); }));
  c.push_back(binary_second("concat[rhs]", {2, 2, 3}, {2, 3, 3}, [](const TD& a, const TD& b) { return concat(a, b, 1); }));
  c.push_back(unary("pick", {3, 4}, [](const TD& a) {
    const std::vector<int> y{2, 0, 3};
    return pick(a, std::span<const int>(y));
  }));
  c.push_back(binary_first("conv2d", xs, ws, [p1](const TD& a, const TD& b) { return conv2d(a, b, p1); }));
  c.push_back(binary_second("conv2d[w]", xs, ws, [p1](const TD& a, const TD& b) { return conv2d(a, b, p1); }));
  c.push_back(binary_first("conv2d[s2]", xs, ws, [p2](const TD& a, const TD& b) { return conv2d(a, b, p2); }));
  c.push_back(binary_second("conv2d[s2,w]", xs, ws, [p2](const TD& a, const TD& b) { return conv2d(a, b, p2); }));
  c.push_back(binary_first("conv2d_input_grad", ys2, ws,
                           [p2, xs](const TD& g, const TD& w) { return conv2d_input_grad(g, w, xs, p2); }));
  c.push_back(binary_second("conv2d_input_grad[w]", ys2, ws,
                            [p2, xs](const TD& g, const TD& w) { return conv2d_input_grad(g, w, xs, p2); }));
  c.push_back(binary_first("conv2d_weight_grad", xs, ys1,
                           [p1, ws](const TD& x, const TD& g) { return conv2d_weight_grad(x, g, ws, p1); }));
  c.push_back(binary_second("conv2d_weight_grad[gy]", xs, ys1,
                            [p1, ws](const TD& x, const TD& g) { return conv2d_weight_grad(x, g, ws, p1); }));
  c.push_back(binary_first("add_channel_bias", {2, 3, 2, 2}, {3},
                           [](const TD& a, const TD& b) { return add_channel_bias(a, b); }));
  c.push_back(binary_second("add_channel_bias[b]", {2, 3, 2, 2}, {3},
                            [](const TD& a, const TD& b) { return add_channel_bias(a, b); }));
  c.push_back(unary("sum_pool2d", {2, 2, 4, 6}, [](const TD& a) { return sum_pool2d(a, 2); }));
  c.push_back(unary("avg_pool2d", {2, 2, 4, 6}, [](const TD& a) { return avg_pool2d(a, 2); }));
  c.push_back(unary("upsample_nearest2d", {1, 2, 2, 3}, [](const TD& a) { return upsample_nearest2d(a, 2); }));
  c.push_back(unary("max_pool2d", {2, 2, 4, 4}, [](const TD& a) { return max_pool2d(a, 2); }));
  c.push_back(unary("bilinear_resize2d", {1, 2, 3, 4}, [](const TD& a) { return bilinear_resize2d(a, 7, 9); }));
  c.push_back(unary("bilinear_resize2d_adjoint", {1, 2, 7, 9},
                    [](const TD& a) { return bilinear_resize2d_adjoint(a, 3, 4); }));
  c.push_back(unary("log_softmax", {3, 5}, [](const TD& a) { return log_softmax(a); }, -3, 3));
  c.push_back(unary("softmax", {3, 5}, [](const TD& a) { return softmax(a); }, -3, 3));
  return c;
}

}  // namespace reff::test
