#pragma once

#include <cmath>
#include <stdexcept>

#include "mvvd/tensor.hpp"

namespace mvvd {

// Central-difference gradient oracle. fn maps a candidate parameter tensor to
// a scalar loss and must be deterministic; analytic holds the gradients under
// test. Returns max over checked entries of
//   |analytic - central| / (|analytic| + |central| + 1e-12).
// When max_entries > 0 and the parameter is larger, entries are strided so at
// most that many are probed (deterministically).
template <typename F>
double finite_diff_check(F&& fn, const AxisTensor<double>& param,
                         const AxisTensor<double>& analytic, double step,
                         int64_t max_entries = 0) {
  check_same_axes(param, analytic, "finite_diff_check");
  if (!(step > 0)) throw std::invalid_argument("finite_diff_check: step must be > 0");
  const int64_t n = param.numel();
  const int64_t stride =
      (max_entries > 0 && n > max_entries) ? (n + max_entries - 1) / max_entries : 1;
  std::vector<double> base(param.data().begin(), param.data().end());
  auto eval = [&](int64_t i, double delta) {
    std::vector<double> vals = base;
    vals[static_cast<size_t>(i)] += delta;
    const double out = fn(AxisTensor<double>(param.axes(), std::move(vals)));
    if (!std::isfinite(out))
      throw std::runtime_error("finite_diff_check: non-finite function value");
    return out;
  };
  double worst = 0;
  for (int64_t i = 0; i < n; i += stride) {
    const double cd = (eval(i, step) - eval(i, -step)) / (2 * step);
    const double an = analytic.at(i);
    const double err = std::abs(an - cd) / (std::abs(an) + std::abs(cd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mvvd
