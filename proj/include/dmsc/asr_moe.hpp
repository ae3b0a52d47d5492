#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "dmsc/nn.hpp"

namespace dmsc {

struct MoeConfig {
  std::size_t d_model = 128;
  std::size_t horizon = 96;
  std::size_t n_scales = 3;
  std::size_t n_global = 2;
  std::size_t n_local = 4;
  std::size_t top_k = 2;
  double balance_lambda = 0.01;
  bool balance_sign_flip = false;
  double history_momentum = 0.9;
  std::size_t temporal_hidden = 16;
};

// Per-row selected local experts.
using Selection = std::vector<std::vector<std::size_t>>;

struct RouteResult {
  Tensor omega;         // [B, M + N_loc] joint softmax
  Tensor omega_global;  // [B, M]
  Tensor omega_local;   // [B, N_loc] before selection
  Tensor local_hat;     // [B, N_loc], zero outside the selection
  Selection selected;   // K indices per row, ascending
};

/// Indices of the k largest entries of `row`, lowest index first on ties,
/// returned in ascending index order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// Keeps the K largest local weights per row and rescales them so the row's
/// total local mass is unchanged. `fixed` reuses a previous selection.
inline std::pair<Tensor, Selection> topk_local(const Tensor& omega_local, std::size_t k, const Selection* fixed = nullptr) {
  const std::size_t rows = omega_local.dim(0), n = omega_local.dim(1);
  if (k < 1 || k > n)
    throw ConfigError("top_k " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  Selection sel;
  Tensor mask({rows, n});
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<std::size_t> idx;
    if (fixed) {
      idx = fixed->at(r);
      if (idx.size() != k) throw ConfigError("fixed selection has wrong size");
    } else {
      idx = top_k_indices(omega_local.data().subspan(r * n, n), k);
    }
    for (std::size_t j : idx) mask[r * n + j] = 1.0;
    sel.push_back(std::move(idx));
  }
  if (k == n && !fixed) return {omega_local, sel};
  Tensor kept = mul(omega_local, mask);
  Tensor rescale = div(sum(omega_local, {1}, true), sum(kept, {1}, true));
  return {mul(kept, rescale), sel};
}

/// Mixture-of-experts head over the per-scale features. Global experts are
/// two-hidden-layer GELU MLPs evaluated densely; local experts have one hidden
/// layer and only run for rows that selected them.
class AsrMoe {
 public:
  struct Output {
    Tensor prediction;    // [B, C, horizon]
    Tensor scale_weights;  // [B, n_scales]
    Tensor balance;       // scalar
    std::vector<RouteResult> routes;
  };

  AsrMoe() = default;
  AsrMoe(const MoeConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.n_global + cfg.n_local == 0) throw ConfigError("ASR-MoE needs at least one expert");
    if (cfg.n_local > 0 && (cfg.top_k < 1 || cfg.top_k > cfg.n_local))
      throw ConfigError("top_k must lie in [1, n_local]");
    const std::size_t d = cfg.d_model, h = 2 * cfg.d_model;
    for (std::size_t m = 0; m < cfg.n_global; ++m)
      global_.emplace_back(std::vector<std::size_t>{d, h, h, cfg.horizon}, rng, Mlp::Activation::gelu);
    for (std::size_t n = 0; n < cfg.n_local; ++n)
      local_.emplace_back(std::vector<std::size_t>{d, h, cfg.horizon}, rng, Mlp::Activation::gelu);
    router_ = Mlp({d, d, cfg.n_global + cfg.n_local}, rng);
    temporal_ = Mlp({6, cfg.temporal_hidden, 1}, rng);
    history_.assign(cfg.n_scales, 1.0);
  }

  const MoeConfig& config() const { return cfg_; }
  std::size_t n_experts() const { return cfg_.n_global + cfg_.n_local; }

  /// Joint softmax over all experts from the variable-averaged feature.
  RouteResult route(const Tensor& feature, const Selection* fixed = nullptr) const {
    RouteResult r;
    const std::size_t b = feature.dim(0);
    r.omega = softmax(router_(mean(feature, {1})), -1);
    if (cfg_.n_global > 0) r.omega_global = slice(r.omega, 1, 0, cfg_.n_global);
    if (cfg_.n_local > 0) {
      r.omega_local = slice(r.omega, 1, cfg_.n_global, cfg_.n_local);
      std::tie(r.local_hat, r.selected) = topk_local(r.omega_local, cfg_.top_k, fixed);
    } else {
      r.selected.assign(b, {});
    }
    return r;
  }

  /// (mean, std, max) of one feature over (C, D): [B, C, D] -> [B, 3].
  static Tensor descriptor(const Tensor& feature) {
    const std::size_t b = feature.dim(0);
    Tensor flat = reshape(feature, {b, feature.size() / b});
    Tensor mu = mean(flat, {1}, true);
    Tensor sd = sqrt(add_scalar(mean(square(sub(flat, mu)), {1}, true), 1e-12));
    return concat({mu, sd, max(flat, 1, true)}, 1);
  }

  /// Softmax scale weights [B, n_scales]. Each scale's descriptor block is
  /// scaled by its history entry; a scorer shared across scales sees the block
  /// together with the mean block over scales, so permuting scales permutes
  /// the weights.
  Tensor temporal_weights(const std::vector<Tensor>& features) const {
    if (features.size() != cfg_.n_scales)
      throw ConfigError("expected " + std::to_string(cfg_.n_scales) + " scale features, got " +
                        std::to_string(features.size()));
    std::vector<Tensor> blocks;
    for (std::size_t l = 0; l < features.size(); ++l) blocks.push_back(scale(descriptor(features[l]), history_[l]));
    Tensor context = blocks[0];
    for (std::size_t l = 1; l < blocks.size(); ++l) context = add(context, blocks[l]);
    context = scale(context, 1.0 / static_cast<double>(blocks.size()));
    std::vector<Tensor> logits;
    for (const auto& blk : blocks) logits.push_back(temporal_(concat({blk, context}, 1)));
    return softmax(concat(logits, 1), 1);
  }

  Tensor predict(const std::vector<Tensor>& features, const std::vector<RouteResult>& routes, const Tensor& w) const {
    Tensor total;
    for (std::size_t l = 0; l < features.size(); ++l) {
      Tensor scale_pred = mixture(features[l], routes[l]);
      Tensor term = mul(column3(w, l), scale_pred);
      total = total.defined() ? add(total, term) : term;
    }
    return total;
  }

  /// -lambda * mean over (batch, scales) of sum_j omega_j log omega_j.
  Tensor balance_loss(const std::vector<RouteResult>& routes) const {
    Tensor acc;
    for (const auto& r : routes) {
      Tensor plogp = sum(mul(r.omega, log(clamp_min(r.omega, 1e-12))), {1});
      Tensor m = mean(plogp, {0});
      acc = acc.defined() ? add(acc, m) : m;
    }
    const double sign = cfg_.balance_sign_flip ? 1.0 : -1.0;
    return scale(acc, sign * cfg_.balance_lambda / static_cast<double>(routes.size()));
  }

  Output forward(const std::vector<Tensor>& features, const std::vector<Selection>* fixed = nullptr) const {
    Output out;
    for (std::size_t l = 0; l < features.size(); ++l)
      out.routes.push_back(route(features[l], fixed ? &fixed->at(l) : nullptr));
    out.scale_weights = temporal_weights(features);
    out.prediction = predict(features, out.routes, out.scale_weights);
    out.balance = balance_loss(out.routes);
    return out;
  }

  /// w_hist <- m * w_hist + (1 - m) * mean over batch of w. Not differentiated.
  void update_history(const Tensor& w) {
    const std::size_t b = w.dim(0), s = w.dim(1);
    const double m = cfg_.history_momentum;
    for (std::size_t l = 0; l < s; ++l) {
      double avg = 0.0;
      for (std::size_t r = 0; r < b; ++r) avg += w[r * s + l];
      history_[l] = m * history_[l] + (1.0 - m) * avg / static_cast<double>(b);
    }
  }

  const std::vector<double>& history() const { return history_; }
  void set_history(std::vector<double> h) {
    if (h.size() != cfg_.n_scales) throw ConfigError("history length mismatch");
    history_ = std::move(h);
  }

  Mlp& global_expert(std::size_t m) { return global_.at(m); }
  Mlp& local_expert(std::size_t n) { return local_.at(n); }
  const Mlp& global_expert(std::size_t m) const { return global_.at(m); }
  const Mlp& local_expert(std::size_t n) const { return local_.at(n); }
  Mlp& router() { return router_; }
  Mlp& temporal() { return temporal_; }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t m = 0; m < global_.size(); ++m) global_[m].collect(prefix + ".global." + std::to_string(m), out);
    for (std::size_t n = 0; n < local_.size(); ++n) local_[n].collect(prefix + ".local." + std::to_string(n), out);
    router_.collect(prefix + ".router", out);
    temporal_.collect(prefix + ".temporal", out);
  }

 private:
  // Column j of a [B, K] tensor as [B, 1, 1].
  static Tensor column3(const Tensor& t, std::size_t j) { return reshape(slice(t, 1, j, 1), {t.dim(0), 1, 1}); }

  Tensor mixture(const Tensor& feature, const RouteResult& r) const {
    const std::size_t b = feature.dim(0);
    Tensor acc;
    auto accumulate = [&](const Tensor& term) { acc = acc.defined() ? add(acc, term) : term; };
    for (std::size_t m = 0; m < global_.size(); ++m) accumulate(mul(column3(r.omega_global, m), global_[m](feature)));
    for (std::size_t n = 0; n < local_.size(); ++n) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < b; ++i)
        if (std::binary_search(r.selected[i].begin(), r.selected[i].end(), n)) rows.push_back(i);
      if (rows.empty()) continue;
      Tensor sub_feature = rows.size() == b ? feature : index_select(feature, rows);
      Tensor weight = column3(r.local_hat, n);
      if (rows.size() != b) weight = index_select(weight, rows);
      Tensor contrib = mul(weight, local_[n](sub_feature));
      accumulate(rows.size() == b ? contrib : scatter_rows(contrib, rows, b));
    }
    return acc;
  }

  MoeConfig cfg_;
  std::vector<Mlp> global_;
  std::vector<Mlp> local_;
  Mlp router_;
  Mlp temporal_;
  std::vector<double> history_;
};

}  // namespace dmsc
