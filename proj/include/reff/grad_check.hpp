#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "reff/tensor.hpp"

namespace reff {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Coordinates whose +-h probe changed a relu mask or pool argmax.
  std::size_t skipped_kinks = 0;
  bool passed = false;
};

/// f maps a tracked (B..)-tensor to a scalar using recorded ops.
using ScalarFn = std::function<Tensor<double>(const Tensor<double>&)>;

/// Compares tape gradients of f at `point` with central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h, per coordinate. The relative error is
/// |tape - fd| / max(|tape|, |fd|, floor) with floor = 1e-6 * max(1, |f(x)|),
/// since rounding in f limits the absolute accuracy of the difference quotient.
inline GradCheckReport grad_check(const ScalarFn& f, const Tensor<double>& point, double h = 1e-5,
                                  double tol = 1e-4, TapeMode mode = TapeMode::FirstOrder) {
  auto& monitor = KinkMonitor::current();
  Tensor<double> x = point.clone();

  std::vector<double> analytic;
  double f0;
  std::uint64_t pattern0;
  {
    Tape<double> tape(mode);
    Tensor<double> xv = tape.variable(x);
    monitor.active = true;
    monitor.hash = 1469598103934665603ull;
    Tensor<double> y = f(xv);
    pattern0 = monitor.hash;
    monitor.active = false;
    if (y.size() != 1) throw TapeError("grad_check: function is not scalar-valued");
    f0 = y.item();
    auto g = tape.grad(y, std::vector<Tensor<double>>{xv}, false);
    analytic.assign(g[0].data().begin(), g[0].data().end());
  }

  auto eval = [&](std::uint64_t& pattern) {
    monitor.active = true;
    monitor.hash = 1469598103934665603ull;
    const double v = f(x).item();
    pattern = monitor.hash;
    monitor.active = false;
    return v;
  };

  GradCheckReport r;
  const double floor = 1e-6 * std::max(1.0, std::abs(f0));
  auto data = x.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    std::uint64_t pp, pm;
    data[i] = orig + h;
    const double fp = eval(pp);
    data[i] = orig - h;
    const double fm = eval(pm);
    data[i] = orig;
    if (pp != pattern0 || pm != pattern0) {
      ++r.skipped_kinks;
      continue;
    }
    const double fd = (fp - fm) / (2 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(fd), floor});
    const double rel = std::abs(analytic[i] - fd) / denom;
    ++r.checked;
    if (rel > r.max_rel_error || std::isnan(rel)) {
      r.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
      r.worst_index = i;
    }
  }
  r.passed = r.max_rel_error <= tol && r.checked > 0;
  return r;
}

}  // namespace reff
