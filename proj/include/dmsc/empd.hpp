#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dmsc/nn.hpp"

namespace dmsc {

/// Bounds and decay for the adaptive patch schedule.
struct PatchBounds {
  std::size_t p_min = 8;
  std::size_t p_max = 48;
  std::size_t decay = 2;
};

struct ScheduleEntry {
  std::size_t layer = 0;
  std::size_t patch = 0;   // P_l
  std::size_t stride = 0;  // S_l = max(1, P_l / 2)
  std::size_t pad = 0;     // replication padding appended on the right
  std::size_t count = 0;   // N_l

  bool operator==(const ScheduleEntry&) const = default;
};

struct ScaleSchedule {
  double alpha = 0.0;
  std::size_t p_base = 0;
  std::size_t length = 0;
  std::vector<ScheduleEntry> layers;
  std::vector<std::string> warnings;

  bool same_layout(const ScaleSchedule& o) const { return length == o.length && layers == o.layers; }
};

inline ScheduleEntry make_entry(std::size_t layer, std::size_t patch, std::size_t length) {
  ScheduleEntry e;
  e.layer = layer;
  e.patch = patch;
  e.stride = std::max<std::size_t>(1, patch / 2);
  e.count = unfold_count(length, patch, e.stride);
  e.pad = (e.count - 1) * e.stride + patch - length;
  return e;
}

/// Validated bounds for a look-back of `length`: P_max is clamped to the
/// length (with a warning), P_min must fit.
inline PatchBounds resolve_bounds(PatchBounds b, std::size_t length, std::vector<std::string>* warnings = nullptr) {
  if (b.p_min < 1) throw ConfigError("p_min must be >= 1");
  if (b.decay < 2) throw ConfigError("patch decay rate must be >= 2, got " + std::to_string(b.decay));
  if (b.p_min > length)
    throw ConfigError("p_min " + std::to_string(b.p_min) + " exceeds look-back length " + std::to_string(length));
  if (b.p_max > length) {
    if (warnings)
      warnings->push_back("p_max " + std::to_string(b.p_max) + " clamped to look-back length " + std::to_string(length));
    b.p_max = length;
  }
  if (b.p_min > b.p_max)
    throw ConfigError("p_min " + std::to_string(b.p_min) + " exceeds p_max " + std::to_string(b.p_max));
  return b;
}

/// Per-layer patch lengths from the controller factor: the base length
/// interpolates [P_min, P_max] (round half up) and each deeper layer divides
/// it by decay^l, floored and bounded below by P_min.
inline ScaleSchedule build_schedule(double alpha, std::size_t length, std::size_t n_layers, PatchBounds bounds) {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  ScaleSchedule s;
  s.alpha = std::clamp(alpha, 0.0, 1.0);
  s.length = length;
  const PatchBounds b = resolve_bounds(bounds, length, &s.warnings);
  const double span = static_cast<double>(b.p_max - b.p_min);
  s.p_base = static_cast<std::size_t>(std::floor(static_cast<double>(b.p_min) + s.alpha * span + 0.5));
  std::size_t divisor = 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t p = std::max(b.p_min, s.p_base / divisor);
    s.layers.push_back(make_entry(l, p, length));
    divisor *= b.decay;
  }
  return s;
}

/// Schedule with the same patch length at every layer.
inline ScaleSchedule uniform_schedule(std::size_t patch, std::size_t length, std::size_t n_layers) {
  if (patch < 1 || patch > length) throw ConfigError("uniform patch length out of range");
  ScaleSchedule s;
  s.length = length;
  s.p_base = patch;
  for (std::size_t l = 0; l < n_layers; ++l) s.layers.push_back(make_entry(l, patch, length));
  return s;
}

/// Largest patch length layer `l` can ever be assigned.
inline std::size_t max_patch_for_layer(PatchBounds bounds, std::size_t length, std::size_t layer) {
  const PatchBounds b = resolve_bounds(bounds, length);
  std::size_t p = b.p_max;
  for (std::size_t i = 0; i < layer; ++i) p /= b.decay;
  return std::max(b.p_min, p);
}

/// Micro-MLP over the time-averaged input: C -> H -> 1, sigmoid output.
class PatchController {
 public:
  PatchController() = default;
  PatchController(std::size_t n_vars, Rng& rng)
      : mlp_({n_vars, std::max<std::size_t>(8, n_vars), 1}, rng) {}

  // x[B, C, L] -> per-sample alpha [B, 1].
  Tensor forward(const Tensor& x) const { return sigmoid(mlp_(mean(x, {2}))); }

  /// Batch-shared alpha: mean of the per-sample values. Patch lengths are
  /// integers, so nothing downstream is differentiated through this.
  double compute_alpha(const Tensor& x) const {
    NoGradGuard no_grad;
    const Tensor a = forward(x);
    double s = 0.0;
    for (double v : a.data()) s += v;
    return s / static_cast<double>(a.size());
  }

  Mlp& mlp() { return mlp_; }
  const Mlp& mlp() const { return mlp_; }
  void collect(const std::string& prefix, ParamList& out) const { mlp_.collect(prefix, out); }

 private:
  Mlp mlp_;
};

/// x[B, C, L] -> patches [B, C, N_l, P_l] via right replication padding and unfold.
inline Tensor decompose(const Tensor& x, const ScheduleEntry& e) {
  if (x.dim(-1) + e.pad != (e.count - 1) * e.stride + e.patch)
    throw ConfigError("schedule entry for layer " + std::to_string(e.layer) + " does not fit input length " +
                      std::to_string(x.dim(-1)));
  const Tensor padded = e.pad > 0 ? replication_pad_right(x, e.pad) : x;
  return unfold(padded, e.patch, e.stride);
}

/// Per-layer linear patch projectors P_l -> D. Because P_l depends on the
/// batch's alpha, layer l's projector is sized for the largest patch that
/// layer can receive; a patch of length P uses the leading P weight rows.
class PatchEmbedding {
 public:
  PatchEmbedding() = default;
  PatchEmbedding(const std::vector<std::size_t>& capacities, std::size_t d_model, Rng& rng) {
    for (std::size_t cap : capacities) projectors_.emplace_back(cap, d_model, rng);
  }

  std::size_t layers() const { return projectors_.size(); }
  std::size_t capacity(std::size_t layer) const { return projectors_.at(layer).in_features(); }

  // patches[B, C, N, P] -> [B, C, N, D]
  Tensor embed(const Tensor& patches, std::size_t layer) const {
    const Linear& proj = projectors_.at(layer);
    const std::size_t p = patches.dim(-1);
    if (p > proj.in_features())
      throw ConfigError("patch length " + std::to_string(p) + " exceeds layer " + std::to_string(layer) +
                        " projector capacity " + std::to_string(proj.in_features()));
    const Tensor w = p == proj.in_features() ? proj.weight : slice(proj.weight, 0, 0, p);
    return linear(patches, w, proj.bias);
  }

  Linear& projector(std::size_t layer) { return projectors_.at(layer); }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < projectors_.size(); ++i) projectors_[i].collect(prefix + "." + std::to_string(i), out);
  }

 private:
  std::vector<Linear> projectors_;
};

}  // namespace dmsc
