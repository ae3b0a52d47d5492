#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmsc/tensor.hpp"

namespace dmsc {

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<input>[<index>]" of the worst coordinate

  bool ok(double tol) const { return std::isfinite(max_rel_err) && max_rel_err < tol; }
};

struct GradCheckOptions {
  double step = 1e-4;
  // Denominator floor so that vanishing gradients are compared absolutely.
  double floor = 1e-6;
  // Per-input cap on checked coordinates; 0 checks everything.
  std::size_t max_coords = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the taped gradient of the scalar `f()` w.r.t. each of `inputs`
/// against a fourth-order central difference
///   (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h,
/// whose truncation error stays below round-off at h = 1e-4, so small
/// gradients are resolved to many digits. `f` must read the inputs' current data, so
/// perturbing them in place changes its value.
inline GradCheckResult check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                       const std::vector<std::string>& names = {}, GradCheckOptions opt = {}) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
  }
  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor& x = inputs[t];
    const std::vector<double> analytic =
        x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end()) : std::vector<double>(x.size(), 0.0);
    const std::size_t n = x.size();
    const std::size_t stride = (opt.max_coords == 0 || n <= opt.max_coords) ? 1 : n / opt.max_coords;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = x[i];
      auto at = [&](double k) {
        x[i] = orig + k * opt.step;
        return f().item();
      };
      const double numeric = (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * opt.step);
      x[i] = orig;
      const double rel = relative_error(analytic[i], numeric, opt.floor);
      ++res.checked;
      res.max_abs_err = std::max(res.max_abs_err, std::abs(analytic[i] - numeric));
      if (!(rel <= res.max_rel_err)) {
        res.max_rel_err = rel;
        res.worst = (t < names.size() ? names[t] : "input" + std::to_string(t)) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace dmsc
