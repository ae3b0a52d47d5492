#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dmsc/empd.hpp"
#include "dmsc/tib.hpp"

namespace dmsc {

enum class ScheduleMode {
  adaptive,  // controller alpha + exponential decay
  fixed_base,  // P_base pinned to a constant, decay kept
  uniform,   // one patch length at every layer
};

struct CascadeConfig {
  std::size_t n_vars = 1;
  std::size_t lookback = 96;
  std::size_t d_model = 128;
  std::size_t n_layers = 3;
  PatchBounds bounds;
  std::size_t kernel = 3;
  std::size_t dilation = 2;
  TibMode tib_mode = TibMode::full;
  ScheduleMode schedule_mode = ScheduleMode::adaptive;
  std::size_t fixed_patch = 0;  // 0 selects the midpoint of [p_min, p_max]
};

/// Gated residual guide: sigmoid(gate(F)) * value(F), mapping [B, C, D] to
/// [B, C, L]. The same map is shared by all variables.
struct GatedProjection {
  Linear value;
  Linear gate;

  GatedProjection() = default;
  GatedProjection(std::size_t d_model, std::size_t length, Rng& rng)
      : value(d_model, length, rng), gate(d_model, length, rng) {}

  Tensor operator()(const Tensor& f) const { return mul(sigmoid(gate(f)), value(f)); }

  void zero() {
    value.zero();
    gate.zero();
  }

  void collect(const std::string& prefix, ParamList& out) const {
    value.collect(prefix + ".value", out);
    gate.collect(prefix + ".gate", out);
  }
};

/// Stacked EMPD -> TIB layers. Layer 0 sees the raw input; layer l > 0 sees
/// the input plus a gated projection of layer l-1's pooled feature.
class Cascade {
 public:
  struct Output {
    std::vector<Tensor> features;  // one [B, C, D] per layer, coarse to fine
    ScaleSchedule schedule;
  };

  Cascade() = default;
  Cascade(const CascadeConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.n_layers < 1) throw ConfigError("n_layers must be >= 1");
    cfg_.bounds = resolve_bounds(cfg.bounds, cfg.lookback);
    if (cfg_.fixed_patch == 0) cfg_.fixed_patch = (cfg_.bounds.p_min + cfg_.bounds.p_max) / 2;
    if (cfg_.fixed_patch < cfg_.bounds.p_min || cfg_.fixed_patch > cfg_.bounds.p_max)
      throw ConfigError("fixed patch length " + std::to_string(cfg_.fixed_patch) + " outside [p_min, p_max]");
    controller_ = PatchController(cfg.n_vars, rng);
    std::vector<std::size_t> caps;
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      caps.push_back(cfg.schedule_mode == ScheduleMode::uniform ? cfg_.fixed_patch
                                                                 : max_patch_for_layer(cfg_.bounds, cfg.lookback, l));
    embedding_ = PatchEmbedding(caps, cfg.d_model, rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      blocks_.emplace_back(cfg.n_vars, cfg.d_model, rng, cfg.kernel, cfg.dilation, cfg.tib_mode);
    for (std::size_t l = 1; l < cfg.n_layers; ++l) guides_.emplace_back(cfg.d_model, cfg.lookback, rng);
  }

  const CascadeConfig& config() const { return cfg_; }

  /// The schedule forward() would use for this batch.
  ScaleSchedule describe_schedule(const Tensor& x) const {
    check_input(x);
    switch (cfg_.schedule_mode) {
      case ScheduleMode::fixed_base: {
        // alpha that lands exactly on the pinned base length
        const double span = static_cast<double>(cfg_.bounds.p_max - cfg_.bounds.p_min);
        const double alpha = span > 0 ? static_cast<double>(cfg_.fixed_patch - cfg_.bounds.p_min) / span : 0.0;
        return build_schedule(alpha, cfg_.lookback, cfg_.n_layers, cfg_.bounds);
      }
      case ScheduleMode::uniform:
        return uniform_schedule(cfg_.fixed_patch, cfg_.lookback, cfg_.n_layers);
      default:
        return build_schedule(controller_.compute_alpha(x), cfg_.lookback, cfg_.n_layers, cfg_.bounds);
    }
  }

  /// `fixed` pins the schedule (used to hold patch lengths constant while
  /// differentiating numerically).
  Output forward(const Tensor& x, const ScaleSchedule* fixed = nullptr) const {
    Output out;
    out.schedule = fixed ? *fixed : describe_schedule(x);
    if (fixed) check_input(x);
    if (out.schedule.layers.size() != cfg_.n_layers) throw ConfigError("schedule depth does not match cascade depth");
    Tensor prev;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const Tensor input = l == 0 ? x : add(guides_[l - 1](prev), x);
      Tensor z = embedding_.embed(decompose(input, out.schedule.layers[l]), l);
      prev = blocks_[l].forward(z).pooled;
      out.features.push_back(prev);
    }
    return out;
  }

  void zero_guides() {
    for (auto& g : guides_) g.zero();
  }

  PatchController& controller() { return controller_; }
  const PatchController& controller() const { return controller_; }
  PatchEmbedding& embedding() { return embedding_; }
  TriadBlock& block(std::size_t l) { return blocks_.at(l); }
  GatedProjection& guide(std::size_t l) { return guides_.at(l - 1); }

  void collect(const std::string& prefix, ParamList& out) const {
    controller_.collect(prefix + ".controller", out);
    embedding_.collect(prefix + ".projector", out);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(prefix + ".tib." + std::to_string(l), out);
    for (std::size_t l = 0; l < guides_.size(); ++l) guides_[l].collect(prefix + ".guide." + std::to_string(l + 1), out);
  }

 private:
  void check_input(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(1) != cfg_.n_vars || x.dim(2) != cfg_.lookback)
      throw ShapeError("cascade expects [B," + std::to_string(cfg_.n_vars) + "," + std::to_string(cfg_.lookback) +
                       "], got " + to_string(x.shape()));
  }

  CascadeConfig cfg_;
  PatchController controller_;
  PatchEmbedding embedding_;
  std::vector<TriadBlock> blocks_;
  std::vector<GatedProjection> guides_;
};

}  // namespace dmsc
