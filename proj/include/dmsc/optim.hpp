#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dmsc/nn.hpp"

namespace dmsc {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(ParamList params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }
  std::size_t steps() const { return t_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Applies one update from the parameters' current gradients. Parameters
  /// the loss did not reach are treated as having zero gradient.
  void step() {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double g : std::as_const(p.tensor).grad())
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
    double scale = 1.0;
    if (opt_.clip_norm > 0) {
      double sq = 0.0;
      for (const auto& p : params_)
        if (p.tensor.has_grad())
          for (double g : std::as_const(p.tensor).grad()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = params_[i].tensor;
      const bool has = w.has_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = has ? scale * std::as_const(w).grad()[k] : 0.0;
        m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * g;
        v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * g * g;
        w[k] -= opt_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt_.eps);
      }
    }
  }

 private:
  ParamList params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace dmsc
