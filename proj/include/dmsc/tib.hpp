#pragma once

#include <string>
#include <vector>

#include "dmsc/nn.hpp"

namespace dmsc {

// Small enough that normalized rows have unit variance to ~1e-7 for O(1e-2+)
// input variance.
inline constexpr double kTibNormEps = 1e-9;

enum class TibMode {
  full,
  intra_only,     // fused = F_intra; inter and cross branches skipped
  no_fused_gate,  // fused = F_intra + F_inter + F_cross
  passthrough,    // F_output = Z
};

/// Depthwise conv over the token axis of z[B, C, N, D] with D channels and
/// "same" zero padding.
inline Tensor depthwise_over_tokens(const Tensor& z, const Tensor& weight, const Tensor& bias, std::size_t dilation) {
  const std::size_t b = z.dim(0), c = z.dim(1), n = z.dim(2), d = z.dim(3);
  Tensor cols = reshape(permute(z, {0, 1, 3, 2}), {b * c, d, n});
  Tensor y = conv1d(cols, weight, bias, Conv1dOptions::same(weight.dim(2), dilation, d));
  return permute(reshape(y, {b, c, d, n}), {0, 1, 3, 2});
}

/// Intra-patch, inter-patch, and cross-variable dependency block with gated
/// fusion and residual LayerNorm. Input and output are [B, C, N, D]; the pooled
/// feature is [B, C, D].
class TriadBlock {
 public:
  struct Output {
    Tensor output;  // [B, C, N, D]
    Tensor pooled;  // [B, C, D]
    Tensor gates;   // [B, C, 3], undefined unless mode == full
  };

  TriadBlock() = default;
  TriadBlock(std::size_t n_vars, std::size_t d_model, Rng& rng, std::size_t kernel = 3, std::size_t dilation = 2,
             TibMode mode = TibMode::full)
      : mode_(mode), dilation_(dilation) {
    intra_dw_w_ = uniform_param({d_model, 1, kernel}, kernel, rng);
    intra_dw_b_ = constant_param({d_model}, 0.0);
    intra_pw_ = Linear(d_model, d_model, rng);
    inter_dw_w_ = uniform_param({d_model, 1, kernel}, kernel, rng);
    inter_dw_b_ = constant_param({d_model}, 0.0);
    inter_pw_ = Linear(d_model, d_model, rng);
    inter_ctx_ = Linear(d_model, d_model, rng);
    cross_gate_ = Mlp({d_model, d_model, n_vars}, rng);
    branch_gate_ = Linear(3 * d_model, 3, rng);
    ln_gamma_ = constant_param({d_model}, 1.0);
    ln_beta_ = constant_param({d_model}, 0.0);
  }

  TibMode mode() const { return mode_; }
  void set_mode(TibMode m) { mode_ = m; }

  Tensor intra_branch(const Tensor& z) const {
    return intra_pw_(depthwise_over_tokens(z, intra_dw_w_, intra_dw_b_, 1));
  }

  /// Dilated depthwise conv + pointwise projection, plus a token-averaged
  /// context vector broadcast back over N.
  Tensor inter_branch(const Tensor& f) const {
    Tensor local = inter_pw_(depthwise_over_tokens(f, inter_dw_w_, inter_dw_b_, dilation_));
    Tensor context = inter_ctx_(mean(f, {2}, true));
    return add(local, context);
  }

  /// One sigmoid gate per variable from the (C, N)-averaged inter features.
  Tensor cross_branch(const Tensor& f_inter) const { return mul(cross_gates(f_inter), f_inter); }

  // [B, C, 1, 1]
  Tensor cross_gates(const Tensor& f_inter) const {
    const std::size_t b = f_inter.dim(0), c = f_inter.dim(1);
    Tensor pooled = reshape(mean(f_inter, {1, 2}), {b, f_inter.dim(3)});
    Tensor g = sigmoid(cross_gate_(pooled));
    if (g.dim(1) != c)
      throw ShapeError("cross gate built for " + std::to_string(g.dim(1)) + " variables, input has " + std::to_string(c));
    return reshape(g, {b, c, 1, 1});
  }

  // [B, C, 3] softmax weights from per-branch token averages.
  Tensor branch_gates(const Tensor& f1, const Tensor& f2, const Tensor& f3) const {
    Tensor desc = concat({mean(f1, {2}), mean(f2, {2}), mean(f3, {2})}, -1);
    return softmax(branch_gate_(desc), -1);
  }

  Output fuse_and_norm(const Tensor& f_intra, const Tensor& f_inter, const Tensor& f_cross, const Tensor& z) const {
    Output out;
    Tensor fused;
    if (mode_ == TibMode::no_fused_gate) {
      fused = add(add(f_intra, f_inter), f_cross);
    } else {
      const std::size_t b = z.dim(0), c = z.dim(1);
      out.gates = branch_gates(f_intra, f_inter, f_cross);
      const Tensor branches[3] = {f_intra, f_inter, f_cross};
      for (std::size_t i = 0; i < 3; ++i) {
        Tensor gi = reshape(slice(out.gates, -1, i, 1), {b, c, 1, 1});
        Tensor term = mul(gi, branches[i]);
        fused = fused.defined() ? add(fused, term) : term;
      }
    }
    return finish(fused, z, std::move(out));
  }

  Output forward(const Tensor& z) const {
    if (z.rank() != 4) throw ShapeError("TIB expects [B,C,N,D], got " + to_string(z.shape()));
    switch (mode_) {
      case TibMode::passthrough: {
        Output out;
        out.output = z;
        out.pooled = mean(z, {2});
        return out;
      }
      case TibMode::intra_only:
        return finish(intra_branch(z), z, {});
      default: {
        Tensor f_intra = intra_branch(z);
        Tensor f_inter = inter_branch(f_intra);
        Tensor f_cross = cross_branch(f_inter);
        return fuse_and_norm(f_intra, f_inter, f_cross, z);
      }
    }
  }

  Mlp& cross_gate() { return cross_gate_; }
  Linear& branch_gate() { return branch_gate_; }
  Linear& intra_pointwise() { return intra_pw_; }
  Linear& inter_pointwise() { return inter_pw_; }
  Linear& inter_context() { return inter_ctx_; }
  Tensor& intra_depthwise() { return intra_dw_w_; }
  Tensor& inter_depthwise() { return inter_dw_w_; }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".intra_dw.weight", intra_dw_w_});
    out.push_back({prefix + ".intra_dw.bias", intra_dw_b_});
    intra_pw_.collect(prefix + ".intra_pw", out);
    out.push_back({prefix + ".inter_dw.weight", inter_dw_w_});
    out.push_back({prefix + ".inter_dw.bias", inter_dw_b_});
    inter_pw_.collect(prefix + ".inter_pw", out);
    inter_ctx_.collect(prefix + ".inter_ctx", out);
    cross_gate_.collect(prefix + ".cross_gate", out);
    branch_gate_.collect(prefix + ".branch_gate", out);
    out.push_back({prefix + ".norm.gamma", ln_gamma_});
    out.push_back({prefix + ".norm.beta", ln_beta_});
  }

 private:
  Output finish(const Tensor& fused, const Tensor& z, Output out) const {
    out.output = add(mul(layernorm(add(fused, z), -1, kTibNormEps), ln_gamma_), ln_beta_);
    out.pooled = mean(out.output, {2});
    return out;
  }

  TibMode mode_ = TibMode::full;
  std::size_t dilation_ = 2;
  Tensor intra_dw_w_, intra_dw_b_;
  Linear intra_pw_;
  Tensor inter_dw_w_, inter_dw_b_;
  Linear inter_pw_;
  Linear inter_ctx_;
  Mlp cross_gate_;
  Linear branch_gate_;
  Tensor ln_gamma_, ln_beta_;
};

}  // namespace dmsc
