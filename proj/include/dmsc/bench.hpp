#pragma once

#include <chrono>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "dmsc/model.hpp"

namespace dmsc {

struct BenchOptions {
  std::vector<std::size_t> lengths{96, 192, 384, 768};
  std::size_t n_vars = 8;
  std::size_t d_model = 64;
  std::size_t n_layers = 3;
  std::size_t horizon = 96;
  std::size_t batch = 4;
  std::size_t min_reps = 5;
  std::size_t max_reps = 1000;
  double min_total_s = 0.2;  // reps grow until one length's timed total reaches this
  std::uint64_t seed = 1;
};

struct BenchPoint {
  std::string kind;  // "L" or "C": which size is varied
  std::size_t size = 0;
  double mean_s = 0.0;
  std::size_t reps = 0;
};

struct ScalingReport {
  std::vector<BenchPoint> points;
  double slope = 0.0;
  std::string note;
};

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("slope fit needs at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ConfigError("slope fit needs distinct sizes");
  return sxy / sxx;
}

/// Mean seconds for one forward + backward pass of the full model. After one
/// warm-up pass, reps double from `min_reps` until the timed total clears
/// `min_total_s`, so short runs are not dominated by timer resolution.
inline BenchPoint time_step(const ModelConfig& cfg, const BenchOptions& opt, const std::string& kind, std::size_t size) {
  Rng rng(opt.seed);
  Model model(cfg, rng);
  Tensor x({opt.batch, cfg.n_vars, cfg.lookback});
  Tensor y({opt.batch, cfg.n_vars, cfg.horizon});
  for (auto& v : x.data()) v = rng.normal();
  for (auto& v : y.data()) v = rng.normal();
  auto params = model.parameters();
  auto step = [&] {
    for (auto& p : params) p.tensor.zero_grad();
    Tape tape;
    const auto out = model.forward(x);
    tape.backward(total_loss(out.prediction, y, out.balance));
  };
  step();
  using clock = std::chrono::steady_clock;
  std::size_t reps = opt.min_reps;
  for (;;) {
    const auto t0 = clock::now();
    for (std::size_t r = 0; r < reps; ++r) step();
    const double total = std::chrono::duration<double>(clock::now() - t0).count();
    if (total >= opt.min_total_s || reps >= opt.max_reps) return {kind, size, total / static_cast<double>(reps), reps};
    reps = std::min(opt.max_reps, reps * 2);
  }
}

inline ModelConfig bench_model_config(const BenchOptions& opt, std::size_t n_vars, std::size_t lookback) {
  ModelConfig cfg;
  cfg.n_vars = n_vars;
  cfg.lookback = lookback;
  cfg.horizon = opt.horizon;
  cfg.d_model = opt.d_model;
  cfg.n_layers = opt.n_layers;
  return cfg;
}

/// Step time against look-back length at fixed C, D and depth.
inline ScalingReport bench_lengths(const BenchOptions& opt) {
  if (opt.lengths.size() < 4) throw ConfigError("scaling bench needs at least 4 lengths");
  ScalingReport rep;
  std::vector<double> xs, ys;
  for (std::size_t len : opt.lengths) {
    rep.points.push_back(time_step(bench_model_config(opt, opt.n_vars, len), opt, "L", len));
    xs.push_back(static_cast<double>(len));
    ys.push_back(rep.points.back().mean_s);
  }
  rep.slope = loglog_slope(xs, ys);
  rep.note = rep.slope < 1.3 ? "consistent with linear scaling in L" : "super-linear in L";
  return rep;
}

/// Step time against variable count at fixed L.
inline ScalingReport bench_vars(const BenchOptions& opt, const std::vector<std::size_t>& counts, std::size_t lookback) {
  ScalingReport rep;
  std::vector<double> xs, ys;
  for (std::size_t c : counts) {
    rep.points.push_back(time_step(bench_model_config(opt, c, lookback), opt, "C", c));
    xs.push_back(static_cast<double>(c));
    ys.push_back(rep.points.back().mean_s);
  }
  rep.slope = loglog_slope(xs, ys);
  rep.note = "slope vs C";
  return rep;
}

/// One row per size plus a summary row carrying the fitted slope.
inline void write_scaling_csv(std::ostream& out, const std::vector<ScalingReport>& reports) {
  out << "kind,size,mean_s,reps,slope\n";
  out.precision(9);
  for (const auto& r : reports) {
    for (const auto& p : r.points) out << p.kind << ',' << p.size << ',' << p.mean_s << ',' << p.reps << ",\n";
    out << "summary_" << (r.points.empty() ? "" : r.points.front().kind) << ",,,," << r.slope << '\n';
  }
}

}  // namespace dmsc
