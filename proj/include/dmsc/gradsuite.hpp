#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dmsc/asr_moe.hpp"
#include "dmsc/cascade.hpp"
#include "dmsc/gradcheck.hpp"
#include "dmsc/model.hpp"

namespace dmsc {

struct GradSuiteEntry {
  std::string module;
  std::string name;
  GradCheckResult result;
};

struct GradSuiteOptions {
  double tol = 1e-4;
  bool inject_fault = false;  // add an op whose adjoint is deliberately wrong
  std::uint64_t seed = 1;
};

/// The micro model used for end-to-end checks: C=2, L=16, D=8, two layers,
/// one global and two local experts with K=1, horizon 4.
inline ModelConfig micro_model_config() {
  ModelConfig cfg;
  cfg.n_vars = 2;
  cfg.lookback = 16;
  cfg.horizon = 4;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_global = 1;
  cfg.n_local = 2;
  cfg.top_k = 1;
  cfg.bounds = {4, 16, 2};
  return cfg;
}

namespace detail {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Away from zero: keeps inputs off kinks (relu, abs, clamp) and poles (log, div).
inline Tensor signed_tensor(Shape shape, Rng& rng, double lo = 0.2, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum_all(mul(y, uniform_tensor(y.shape(), rng)));
}

inline void add_params(const ParamList& params, std::vector<Tensor>& inputs, std::vector<std::string>& names) {
  for (const auto& p : params) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
}

}  // namespace detail

/// Finite-difference checks for every differentiable primitive and each
/// model component, ending with the end-to-end micro model. Discrete choices
/// (patch schedule, top-K selection) are held fixed while perturbing.
inline std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& opt = {}) {
  using detail::signed_tensor;
  using detail::uniform_tensor;
  std::vector<GradSuiteEntry> out;
  Rng rng(opt.seed);
  std::uint64_t probe_seed = 1000;
  auto check = [&](const std::string& module, const std::string& name, const std::function<Tensor()>& f,
                   std::vector<Tensor> inputs, std::vector<std::string> names = {}) {
    const std::uint64_t ps = ++probe_seed;
    out.push_back({module, name, check_gradients([&] { return detail::weighted_sum(f(), ps); }, std::move(inputs), names)});
  };
  auto unary_check = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& op, Tensor x) {
    check("ops", name, [op, x] { return op(x); }, {x});
  };

  // -- elementwise
  {
    Tensor a = uniform_tensor({3, 4}, rng), b = uniform_tensor({4}, rng), c = signed_tensor({3, 1}, rng);
    check("ops", "add", [=] { return add(a, b); }, {a, b});
    check("ops", "sub", [=] { return sub(a, c); }, {a, c});
    check("ops", "mul", [=] { return mul(a, b); }, {a, b});
    check("ops", "div", [=] { return div(a, c); }, {a, c});
  }
  unary_check("scale", [](const Tensor& x) { return scale(x, -2.5); }, uniform_tensor({5}, rng));
  unary_check("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, uniform_tensor({5}, rng));
  unary_check("exp", [](const Tensor& x) { return exp(x); }, uniform_tensor({5}, rng));
  unary_check("log", [](const Tensor& x) { return log(x); }, uniform_tensor({5}, rng, 0.2, 2.0));
  unary_check("sqrt", [](const Tensor& x) { return sqrt(x); }, uniform_tensor({5}, rng, 0.2, 2.0));
  unary_check("square", [](const Tensor& x) { return square(x); }, uniform_tensor({5}, rng));
  unary_check("abs", [](const Tensor& x) { return abs(x); }, signed_tensor({5}, rng));
  unary_check("sigmoid", [](const Tensor& x) { return sigmoid(x); }, uniform_tensor({5}, rng, -4, 4));
  unary_check("tanh", [](const Tensor& x) { return tanh(x); }, uniform_tensor({5}, rng, -2, 2));
  unary_check("relu", [](const Tensor& x) { return relu(x); }, signed_tensor({6}, rng));
  unary_check("gelu", [](const Tensor& x) { return gelu(x); }, uniform_tensor({6}, rng, -3, 3));
  unary_check("clamp_min", [](const Tensor& x) { return clamp_min(x, 0.0); }, signed_tensor({6}, rng));
  // -- reductions
  unary_check("sum", [](const Tensor& x) { return sum(x, {0, 2}, true); }, uniform_tensor({2, 3, 4}, rng));
  unary_check("mean", [](const Tensor& x) { return mean(x, {1}); }, uniform_tensor({2, 3, 4}, rng));
  unary_check("max", [](const Tensor& x) { return max(x, 1); }, uniform_tensor({3, 5}, rng));
  unary_check("softmax", [](const Tensor& x) { return softmax(x, -1); }, uniform_tensor({3, 5}, rng, -2, 2));
  unary_check("layernorm", [](const Tensor& x) { return layernorm(x, -1, 1e-5); }, uniform_tensor({3, 6}, rng));
  // -- shape
  unary_check("reshape", [](const Tensor& x) { return reshape(x, {4, 3}); }, uniform_tensor({2, 6}, rng));
  unary_check("permute", [](const Tensor& x) { return permute(x, {2, 0, 1}); }, uniform_tensor({2, 3, 4}, rng));
  unary_check("slice", [](const Tensor& x) { return slice(x, 1, 1, 2); }, uniform_tensor({2, 4, 3}, rng));
  {
    Tensor a = uniform_tensor({2, 3}, rng), b = uniform_tensor({2, 2}, rng);
    check("ops", "concat", [=] { return concat({a, b}, 1); }, {a, b});
  }
  unary_check("index_select", [](const Tensor& x) { return index_select(x, {2, 0, 2}); }, uniform_tensor({4, 3}, rng));
  unary_check("scatter_rows", [](const Tensor& x) { return scatter_rows(x, {3, 1}, 5); }, uniform_tensor({2, 3}, rng));
  unary_check("replication_pad_right", [](const Tensor& x) { return replication_pad_right(x, 3); },
              uniform_tensor({2, 5}, rng));
  unary_check("unfold", [](const Tensor& x) { return unfold(x, 4, 2); }, uniform_tensor({2, 10}, rng));
  // -- contractions
  {
    Tensor a = uniform_tensor({3, 3}, rng), b = uniform_tensor({3, 3}, rng);
    check("ops", "matmul", [=] { return matmul(a, b); }, {a, b});
    Tensor p = uniform_tensor({2, 3, 4}, rng), q = uniform_tensor({4, 2}, rng), r = uniform_tensor({2, 4, 2}, rng);
    check("ops", "matmul_batched", [=] { return add(matmul(p, q), matmul(p, r)); }, {p, q, r});
    Tensor x = uniform_tensor({2, 3, 4}, rng), w = uniform_tensor({4, 5}, rng), bias = uniform_tensor({5}, rng);
    check("ops", "linear", [=] { return linear(x, w, bias); }, {x, w, bias});
  }
  {
    Tensor x = uniform_tensor({2, 4, 9}, rng), w = uniform_tensor({6, 2, 3}, rng), bias = uniform_tensor({6}, rng);
    Conv1dOptions grouped{2, 2, 2, 2, 2};
    check("ops", "conv1d", [=] { return conv1d(x, w, bias, grouped); }, {x, w, bias});
    Tensor wd = uniform_tensor({4, 1, 3}, rng);
    check("ops", "conv1d_depthwise", [=] { return conv1d(x, wd, {}, Conv1dOptions::same(3, 2, 4)); }, {x, wd});
  }
  if (opt.inject_fault) {
    // Forward x^2, adjoint 3x: must be reported as a failure.
    unary_check("faulty_square",
                [](const Tensor& x) {
                  return detail::unary(
                      x, [](double v) { return v * v; }, [](double v, double) { return 3.0 * v; });
                },
                uniform_tensor({5}, rng));
  }

  // -- components
  {
    PatchEmbedding emb({5}, 6, rng);
    Tensor p = uniform_tensor({2, 3, 4, 5}, rng);
    auto& proj = emb.projector(0);
    check("empd", "embed", [&emb, p] { return emb.embed(p, 0); }, {p, proj.weight, proj.bias}, {"patches", "weight", "bias"});
    Tensor x = uniform_tensor({2, 3, 11}, rng);
    const ScheduleEntry e = make_entry(0, 4, 11);
    check("empd", "decompose", [x, e] { return decompose(x, e); }, {x}, {"x"});
  }
  {
    TriadBlock blk(3, 6, rng);
    Tensor z = uniform_tensor({2, 3, 4, 6}, rng);
    std::vector<Tensor> inputs{z};
    std::vector<std::string> names{"z"};
    ParamList params;
    blk.collect("tib", params);
    detail::add_params(params, inputs, names);
    check("tib", "triad_block", [&blk, z] { return blk.forward(z).output; }, inputs, names);
  }
  {
    CascadeConfig cc;
    cc.n_vars = 2;
    cc.lookback = 24;
    cc.d_model = 8;
    cc.n_layers = 2;
    cc.bounds = {4, 12, 2};
    Cascade net(cc, rng);
    Tensor x = uniform_tensor({2, 2, 24}, rng);
    const ScaleSchedule sched = net.describe_schedule(x);
    std::vector<Tensor> inputs{x};
    std::vector<std::string> names{"x"};
    ParamList params;
    net.collect("cascade", params);
    detail::add_params(params, inputs, names);
    check("cascade", "two_layer",
          [&net, x, sched] {
            const auto o = net.forward(x, &sched);
            return concat({o.features[0], o.features[1]}, 2);
          },
          inputs, names);
  }
  {
    MoeConfig mc;
    mc.d_model = 6;
    mc.horizon = 4;
    mc.n_scales = 2;
    mc.n_global = 1;
    mc.n_local = 3;
    mc.top_k = 2;
    AsrMoe moe(mc, rng);
    std::vector<Tensor> feats{uniform_tensor({3, 2, 6}, rng), uniform_tensor({3, 2, 6}, rng)};
    std::vector<Selection> fixed;
    for (const auto& r : moe.forward(feats).routes) fixed.push_back(r.selected);
    std::vector<Tensor> inputs(feats.begin(), feats.end());
    std::vector<std::string> names{"F0", "F1"};
    ParamList params;
    moe.collect("moe", params);
    detail::add_params(params, inputs, names);
    check("asr_moe", "sparse_head",
          [&moe, feats, fixed] {
            const auto o = moe.forward(feats, &fixed);
            return add(reshape(sum_all(o.prediction), {1}), o.balance);
          },
          inputs, names);
  }
  {
    Model model(micro_model_config(), rng);
    Tensor x = uniform_tensor({2, 2, 16}, rng);
    Tensor y = uniform_tensor({2, 2, 4}, rng);
    const Decisions fixed = model.forward(x).decisions;
    std::vector<Tensor> inputs{x};
    std::vector<std::string> names{"x"};
    detail::add_params(model.parameters(), inputs, names);
    out.push_back({"model", "micro_end_to_end", check_gradients(
                                                     [&] {
                                                       const auto o = model.forward(x, &fixed);
                                                       return total_loss(o.prediction, y, o.balance);
                                                     },
                                                     inputs, names)});
  }
  return out;
}

}  // namespace dmsc
