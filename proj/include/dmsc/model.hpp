#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "dmsc/asr_moe.hpp"
#include "dmsc/cascade.hpp"

namespace dmsc {

enum class Variant {
  full,
  static_decomp,  // P_base pinned; controller bypassed
  intra_only,     // TIB keeps only F_intra
  no_fused_gate,  // TIB sums branches unweighted
  agg_heads,      // per-scale linear heads, summed
  no_global,      // ASR-MoE without global experts
  no_local,       // ASR-MoE without local experts
  no_empd,        // one fixed patch length at every layer
  no_tib,         // TIB replaced by identity
  no_asrmoe,      // single linear head on the scale-averaged feature
};

inline constexpr std::array<std::pair<std::string_view, Variant>, 10> kVariants{{
    {"full", Variant::full},
    {"static_decomp", Variant::static_decomp},
    {"intra_only", Variant::intra_only},
    {"no_fused_gate", Variant::no_fused_gate},
    {"agg_heads", Variant::agg_heads},
    {"no_global", Variant::no_global},
    {"no_local", Variant::no_local},
    {"no_empd", Variant::no_empd},
    {"no_tib", Variant::no_tib},
    {"no_asrmoe", Variant::no_asrmoe},
}};

inline std::string variant_names() {
  std::string s;
  for (const auto& [name, v] : kVariants) s += (s.empty() ? "" : ", ") + std::string(name);
  return s;
}

inline Variant parse_variant(std::string_view name) {
  for (const auto& [n, v] : kVariants)
    if (n == name) return v;
  throw ConfigError("unknown variant '" + std::string(name) + "'; valid: " + variant_names());
}

inline std::string_view variant_name(Variant v) {
  for (const auto& [n, x] : kVariants)
    if (x == v) return n;
  return "?";
}

struct ModelConfig {
  std::size_t n_vars = 1;
  std::size_t lookback = 96;
  std::size_t horizon = 96;
  std::size_t d_model = 128;
  std::size_t n_layers = 3;
  PatchBounds bounds;
  std::size_t kernel = 3;
  std::size_t dilation = 2;
  std::size_t n_global = 2;
  std::size_t n_local = 4;
  std::size_t top_k = 2;
  double balance_lambda = 0.01;
  bool balance_sign_flip = false;
  std::size_t fixed_patch = 0;  // static_decomp / no_empd; 0 = midpoint of bounds
  bool instance_norm = true;
  Variant variant = Variant::full;
};

/// The discrete choices of one forward pass. Replaying them makes the model a
/// smooth function of its inputs and parameters.
struct Decisions {
  ScaleSchedule schedule;
  std::vector<Selection> selections;  // one per scale; empty without a MoE head
};

inline constexpr double kInstanceNormEps = 1e-5;

/// Full forecaster: optional per-window instance normalization, the EMPD/TIB
/// cascade, and a prediction head (ASR-MoE or an ablation head).
class Model {
 public:
  struct Output {
    Tensor prediction;     // [B, C, horizon]
    Tensor balance;        // scalar (zero without routing)
    Tensor scale_weights;  // [B, n_layers]; undefined without routing
    std::vector<RouteResult> routes;
    Decisions decisions;
  };

  Model() = default;
  Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    CascadeConfig cc;
    cc.n_vars = cfg.n_vars;
    cc.lookback = cfg.lookback;
    cc.d_model = cfg.d_model;
    cc.n_layers = cfg.n_layers;
    cc.bounds = cfg.bounds;
    cc.kernel = cfg.kernel;
    cc.dilation = cfg.dilation;
    cc.fixed_patch = cfg.fixed_patch;
    switch (cfg.variant) {
      case Variant::static_decomp: cc.schedule_mode = ScheduleMode::fixed_base; break;
      case Variant::no_empd: cc.schedule_mode = ScheduleMode::uniform; break;
      case Variant::intra_only: cc.tib_mode = TibMode::intra_only; break;
      case Variant::no_fused_gate: cc.tib_mode = TibMode::no_fused_gate; break;
      case Variant::no_tib: cc.tib_mode = TibMode::passthrough; break;
      default: break;
    }
    cascade_ = Cascade(cc, rng);
    if (cfg.variant == Variant::agg_heads) {
      for (std::size_t l = 0; l < cfg.n_layers; ++l) heads_.emplace_back(cfg.d_model, cfg.horizon, rng);
    } else if (cfg.variant == Variant::no_asrmoe) {
      heads_.emplace_back(cfg.d_model, cfg.horizon, rng);
    } else {
      MoeConfig mc;
      mc.d_model = cfg.d_model;
      mc.horizon = cfg.horizon;
      mc.n_scales = cfg.n_layers;
      mc.n_global = cfg.variant == Variant::no_global ? 0 : cfg.n_global;
      mc.n_local = cfg.variant == Variant::no_local ? 0 : cfg.n_local;
      mc.top_k = cfg.top_k;
      mc.balance_lambda = cfg.balance_lambda;
      mc.balance_sign_flip = cfg.balance_sign_flip;
      moe_ = AsrMoe(mc, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  bool routed() const { return heads_.empty(); }

  /// x[B, C, lookback] -> forecast [B, C, horizon] on the same scale as x.
  Output forward(const Tensor& x, const Decisions* fixed = nullptr) const {
    if (x.rank() != 3 || x.dim(1) != cfg_.n_vars || x.dim(2) != cfg_.lookback)
      throw ShapeError("model expects [B," + std::to_string(cfg_.n_vars) + "," + std::to_string(cfg_.lookback) +
                       "], got " + to_string(x.shape()));
    Tensor input = x, mu, sd;
    if (cfg_.instance_norm) {
      mu = mean(x, {2}, true);
      Tensor centered = sub(x, mu);
      sd = sqrt(add_scalar(mean(square(centered), {2}, true), kInstanceNormEps));
      input = div(centered, sd);
    }
    Output out;
    // The patch controller reads the window before instance normalization:
    // its only input is the time average, which normalization sets to zero.
    const ScaleSchedule schedule = fixed ? fixed->schedule : cascade_.describe_schedule(x);
    auto feats = cascade_.forward(input, &schedule);
    out.decisions.schedule = feats.schedule;
    Tensor pred;
    if (routed()) {
      auto moe_out = moe_.forward(feats.features, fixed && !fixed->selections.empty() ? &fixed->selections : nullptr);
      pred = moe_out.prediction;
      out.balance = moe_out.balance;
      out.scale_weights = moe_out.scale_weights;
      for (const auto& r : moe_out.routes) out.decisions.selections.push_back(r.selected);
      out.routes = std::move(moe_out.routes);
    } else {
      out.balance = Tensor::scalar(0.0);
      if (cfg_.variant == Variant::agg_heads) {
        for (std::size_t l = 0; l < heads_.size(); ++l) {
          Tensor term = heads_[l](feats.features[l]);
          pred = pred.defined() ? add(pred, term) : term;
        }
      } else {
        Tensor avg = feats.features[0];
        for (std::size_t l = 1; l < feats.features.size(); ++l) avg = add(avg, feats.features[l]);
        pred = heads_[0](scale(avg, 1.0 / static_cast<double>(feats.features.size())));
      }
    }
    out.prediction = cfg_.instance_norm ? add(mul(pred, sd), mu) : pred;
    return out;
  }

  /// Post-step memory update from the batch's scale weights.
  void update_history(const Output& out) {
    if (routed() && out.scale_weights.defined()) moe_.update_history(out.scale_weights);
  }

  std::vector<double> history() const { return routed() ? moe_.history() : std::vector<double>{}; }
  void set_history(std::vector<double> h) {
    if (routed()) moe_.set_history(std::move(h));
  }

  ParamList parameters() const {
    ParamList p;
    cascade_.collect("cascade", p);
    if (routed()) moe_.collect("moe", p);
    for (std::size_t l = 0; l < heads_.size(); ++l) heads_[l].collect("head." + std::to_string(l), p);
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  Cascade& cascade() { return cascade_; }
  AsrMoe& moe() { return moe_; }

 private:
  ModelConfig cfg_;
  Cascade cascade_;
  AsrMoe moe_;
  std::vector<Linear> heads_;
};

/// mean((y_hat - y)^2) + balance.
inline Tensor total_loss(const Tensor& prediction, const Tensor& target, const Tensor& balance) {
  if (prediction.shape() != target.shape())
    throw ShapeError("prediction " + to_string(prediction.shape()) + " vs target " + to_string(target.shape()));
  return add(mean_all(square(sub(prediction, target))), balance);
}

}  // namespace dmsc
