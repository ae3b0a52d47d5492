#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dmsc/ops.hpp"
#include "dmsc/rng.hpp"

namespace dmsc {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline Tensor uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), 0.0, true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

inline Tensor constant_param(Shape shape, double value) { return Tensor(std::move(shape), value, true); }

inline void fill(Tensor& t, double value) {
  for (auto& v : t.data()) v = value;
}

// weight is [in, out] so that x[..., in] * weight works without a transpose.
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(uniform_param({in, out}, in, rng)), bias(constant_param({out}, 0.0)) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void zero() {
    fill(weight, 0.0);
    fill(bias, 0.0);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Stack of Linear layers with `act` between them (not after the last).
struct Mlp {
  enum class Activation { relu, gelu };

  std::vector<Linear> layers;
  Activation act = Activation::gelu;

  Mlp() = default;
  Mlp(const std::vector<std::size_t>& widths, Rng& rng, Activation a = Activation::gelu) : act(a) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
  }

  Tensor operator()(Tensor x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = act == Activation::relu ? relu(x) : gelu(x);
    }
    return x;
  }

  std::size_t depth() const { return layers.size(); }

  void zero() {
    for (auto& l : layers) l.zero();
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
  }
};

}  // namespace dmsc
