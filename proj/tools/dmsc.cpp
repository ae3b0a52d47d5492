#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dmsc/bench.hpp"
#include "dmsc/gradsuite.hpp"
#include "dmsc/run.hpp"

namespace fs = std::filesystem;
using namespace dmsc;

namespace {

// Exit codes: 0 success, 1 runtime failure, 2 bad input (config, data,
// checkpoint, arguments).
constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kBadInput = 2;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "out";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", c.config, "run config (key = value with [sections])");
    cmd->add_option("--set", c.overrides, "override a field, e.g. --set model.d_model=32")->take_all();
  }
  cmd->add_option_function<std::uint64_t>("--seed", [&c](std::uint64_t s) {
    c.seed = s;
    c.seed_set = true;
  }, "training seed (overrides train.seed)");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigFieldError(kv, "--set expects key=value");
    set_field(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed_set) cfg.train.seed = c.seed;
  validate(cfg);
  return cfg;
}

int cmd_train(const Common& c, bool dump_routing, const std::string& command, const std::string& variant) {
  RunConfig cfg = resolve_config(c);
  if (!variant.empty()) cfg.model.variant = parse_variant(variant);
  RunOptions opt;
  opt.out_dir = c.out;
  opt.command = command;
  opt.dump_routing = dump_routing;
  const RunSummary s = run_training(cfg, opt);
  for (const auto& e : s.result.log)
    std::cout << "epoch " << e.epoch << "  train_mse " << e.train_mse << "  val_mse " << e.val_mse << "  val_mae "
              << e.val_mae << "  (" << e.elapsed_s << " s)\n";
  std::cout << variant_name(cfg.model.variant) << ": best epoch " << s.result.best_epoch << ", val_mse "
            << exact(s.result.best_val_mse) << (s.result.early_stopped ? " (early stop)" : "") << "\nwrote";
  for (const auto& a : s.artifacts) std::cout << ' ' << (fs::path(c.out) / a).string();
  std::cout << ' ' << (fs::path(c.out) / "manifest.json").string() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split = "val";
  std::size_t horizon = 0;
  std::size_t window = 0;
  bool last = true;
};

/// Checkpoint config, with the data section optionally replaced from --config.
std::pair<Checkpoint, LoadedData> open_checkpoint(const Common& c, const EvalArgs& a) {
  Checkpoint ck = read_checkpoint(a.checkpoint);
  if (a.horizon && a.horizon != ck.config.model.horizon)
    throw ConfigFieldError("--horizon", "checkpoint was trained for horizon " + std::to_string(ck.config.model.horizon) +
                                            ", got " + std::to_string(a.horizon));
  RunConfig data_cfg = ck.config;
  if (!c.config.empty() || !c.overrides.empty()) {
    Common only_data = c;
    only_data.seed_set = false;
    const RunConfig other = resolve_config(only_data);
    data_cfg.data = other.data;
    data_cfg.raw_metrics = other.raw_metrics;
  }
  LoadedData data = load_data(data_cfg);
  if (data.frame.vars() != ck.n_vars)
    throw ShapeError("dataset has " + std::to_string(data.frame.vars()) + " variables, checkpoint expects " +
                     std::to_string(ck.n_vars));
  return {std::move(ck), std::move(data)};
}

int cmd_eval(const Common& c, const EvalArgs& a) {
  auto [ck, data] = open_checkpoint(c, a);
  const Split split = parse_split(a.split);
  const Model model = restore_model(ck);
  EvalOptions opt;
  opt.batch_size = ck.config.train.eval_batch;
  opt.raw_scale = ck.config.raw_metrics;
  const Metrics m = evaluate(model, data.windows, split, opt);
  std::cout << "split " << a.split << "  horizon " << ck.config.model.horizon << "  mse " << exact(m.mse) << "  mae "
            << exact(m.mae) << "  windows " << data.windows.window_count(split) << '\n';
  fs::create_directories(c.out);
  const fs::path csv = fs::path(c.out) / "eval.csv";
  const bool fresh = !fs::exists(csv);
  std::ofstream out(csv, std::ios::app);
  if (fresh) out << "checkpoint,split,horizon,mse,mae,count\n";
  out << '"' << a.checkpoint << "\"," << a.split << ',' << ck.config.model.horizon << ',' << exact(m.mse) << ','
      << exact(m.mae) << ',' << m.count << '\n';
  return kOk;
}

int cmd_forecast(const Common& c, const EvalArgs& a) {
  auto [ck, data] = open_checkpoint(c, a);
  const Split split = parse_split(a.split);
  const Model model = restore_model(ck);
  const auto& w = data.windows;
  const std::size_t n = w.window_count(split);
  if (n == 0) throw ConfigError("split '" + a.split + "' has no windows");
  const std::size_t idx = a.last ? n - 1 : a.window;
  if (idx >= n) throw ConfigFieldError("--window", "index " + std::to_string(idx) + " out of range (" + std::to_string(n) + " windows)");
  // Checkpoint statistics are authoritative for denormalization.
  Standardizer stats;
  const auto& mu = ck.tensors.at("state.norm_mean").data();
  const auto& sd = ck.tensors.at("state.norm_std").data();
  stats.mean.assign(mu.begin(), mu.end());
  stats.std.assign(sd.begin(), sd.end());
  const Batch b = w.batch(split, {idx});
  Tensor pred;
  {
    NoGradGuard no_grad;
    pred = model.forward(b.x).prediction;
  }
  fs::create_directories(c.out);
  std::ofstream out(fs::path(c.out) / "forecast.csv");
  out << "window,step,row,variable,forecast,actual\n";
  const std::size_t h = w.horizon(), start = w.window_start(split, idx) + w.lookback();
  for (std::size_t v = 0; v < w.vars(); ++v)
    for (std::size_t t = 0; t < h; ++t)
      out << idx << ',' << t + 1 << ',' << start + t << ",\"" << data.frame.names[v] << "\","
          << exact(stats.denormalize(pred[v * h + t], v)) << ',' << exact(stats.denormalize(b.y[v * h + t], v)) << '\n';
  std::cout << "wrote " << (fs::path(c.out) / "forecast.csv").string() << " (" << split_name(split) << " window " << idx
            << ", " << h << " steps x " << w.vars() << " variables)\n";
  return kOk;
}

int cmd_gradcheck(const Common& c, bool inject_fault, double tol) {
  GradSuiteOptions opt;
  opt.inject_fault = inject_fault;
  opt.tol = tol;
  if (c.seed_set) opt.seed = c.seed;
  const auto entries = run_grad_suite(opt);
  std::map<std::string, std::pair<double, bool>> modules;
  std::vector<std::string> order;
  bool all_ok = true;
  for (const auto& e : entries) {
    const bool ok = e.result.ok(tol);
    all_ok = all_ok && ok;
    std::cout << (ok ? "  ok   " : "  FAIL ") << e.module << '/' << e.name << "  max_rel_err " << e.result.max_rel_err
              << "  coords " << e.result.checked << (ok ? "" : "  worst " + e.result.worst) << '\n';
    if (!modules.count(e.module)) order.push_back(e.module);
    auto& [worst, mod_ok] = modules.try_emplace(e.module, 0.0, true).first->second;
    worst = std::max(worst, e.result.max_rel_err);
    mod_ok = mod_ok && ok;
  }
  std::cout << "module max_rel_err (tol " << tol << "):\n";
  for (const auto& m : order)
    std::cout << "  " << m << ' ' << modules[m].first << (modules[m].second ? " ok" : " FAIL") << '\n';
  fs::create_directories(c.out);
  std::ofstream csv(fs::path(c.out) / "gradcheck.csv");
  csv << "module,check,max_rel_err,max_abs_err,coords,pass\n";
  for (const auto& e : entries)
    csv << e.module << ',' << e.name << ',' << exact(e.result.max_rel_err) << ',' << exact(e.result.max_abs_err) << ','
        << e.result.checked << ',' << (e.result.ok(tol) ? 1 : 0) << '\n';
  std::cout << (all_ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return all_ok ? kOk : kRuntime;
}

int cmd_bench(const Common& c, BenchOptions opt, const std::vector<std::size_t>& cs) {
  // Timings are taken on one worker.
  setenv("DMSC_THREADS", "1", 1);
  if (c.seed_set) opt.seed = c.seed;
  std::vector<ScalingReport> reports{bench_lengths(opt)};
  if (!cs.empty()) reports.push_back(bench_vars(opt, cs, opt.lengths.front()));
  for (const auto& r : reports) {
    for (const auto& p : r.points)
      std::cout << p.kind << '=' << p.size << "  " << p.mean_s * 1e3 << " ms/step  (" << p.reps << " reps)\n";
    std::cout << "slope " << r.slope << "  " << r.note << '\n';
  }
  fs::create_directories(c.out);
  std::ofstream out(fs::path(c.out) / "bench.csv");
  write_scaling_csv(out, reports);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale patch forecaster: train, evaluate and inspect models"};
  app.require_subcommand(1);
  Common common;
  bool dump_routing = false;
  std::string variant;

  auto* train_cmd = app.add_subcommand("train", "train a model; writes model.ckpt, metrics.csv, manifest.json");
  add_common(train_cmd, common);
  train_cmd->add_flag("--dump-routing", dump_routing, "write per-step router weights to routing.csv");

  auto* ablate_cmd = app.add_subcommand("ablate", "train a toggled variant of the model");
  add_common(ablate_cmd, common);
  ablate_cmd->add_option("--variant", variant, "one of: " + variant_names())->required();
  ablate_cmd->add_flag("--dump-routing", dump_routing, "write per-step router weights to routing.csv");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a split; appends to eval.csv");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--horizon", ev.horizon, "expected forecast horizon");

  EvalArgs fc;
  fc.split = "test";
  auto* forecast_cmd = app.add_subcommand("forecast", "write a denormalized forecast for one window");
  add_common(forecast_cmd, common);
  forecast_cmd->add_option("--checkpoint", fc.checkpoint, "checkpoint file")->required();
  forecast_cmd->add_option("--split", fc.split, "train, val or test")->capture_default_str();
  forecast_cmd->add_option("--horizon", fc.horizon, "expected forecast horizon");
  forecast_cmd->add_option_function<std::size_t>("--window", [&fc](std::size_t w) {
    fc.window = w;
    fc.last = false;
  }, "window index within the split (default: last)");

  bool inject_fault = false;
  double tol = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op and module");
  add_common(grad_cmd, common, false);
  grad_cmd->add_flag("--inject-fault", inject_fault, "include an op with a deliberately wrong adjoint");
  grad_cmd->add_option("--tol", tol, "max relative error")->capture_default_str();

  BenchOptions bench;
  std::vector<std::size_t> cs;
  auto* bench_cmd = app.add_subcommand("bench", "time forward+backward against look-back length");
  add_common(bench_cmd, common, false);
  bench_cmd->add_option("--ls", bench.lengths, "look-back lengths")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--cs", cs, "also scan these variable counts at the first length")->delimiter(',');
  bench_cmd->add_option("--vars", bench.n_vars, "variables")->capture_default_str();
  bench_cmd->add_option("--d-model", bench.d_model, "model width")->capture_default_str();
  bench_cmd->add_option("--layers", bench.n_layers, "cascade depth")->capture_default_str();
  bench_cmd->add_option("--batch", bench.batch, "batch size")->capture_default_str();
  bench_cmd->add_option("--reps", bench.min_reps, "minimum timed reps per size")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kBadInput;
  }

  try {
    if (*train_cmd) return cmd_train(common, dump_routing, "train", "");
    if (*ablate_cmd) return cmd_train(common, dump_routing, "ablate", variant);
    if (*eval_cmd) return cmd_eval(common, ev);
    if (*forecast_cmd) return cmd_forecast(common, fc);
    if (*grad_cmd) return cmd_gradcheck(common, inject_fault, tol);
    if (*bench_cmd) {
      if (bench.min_reps < 5) throw ConfigFieldError("--reps", "at least 5 reps are required");
      return cmd_bench(common, bench, cs);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadInput;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kBadInput;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kBadInput;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kRuntime;
}
