// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance            run every criterion
//   acceptance --only N   run criterion N (exit 0 pass, 1 fail, 77 skipped)

#include <Eigen/Dense>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dmsc/bench.hpp"
#include "dmsc/gradsuite.hpp"
#include "dmsc/run.hpp"

namespace fs = std::filesystem;
using namespace dmsc;

namespace {

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Independent baselines, computed directly from the normalized series.

/// Repeat the last observed value over the horizon.
double persistence_mse(const WindowedDataset& w, Split split) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < w.window_count(split); ++i) {
    const std::size_t start = w.window_start(split, i);
    for (std::size_t v = 0; v < w.vars(); ++v) {
      const double last = w.value(start + w.lookback() - 1, v);
      for (std::size_t t = 0; t < w.horizon(); ++t) {
        const double e = w.value(start + w.lookback() + t, v) - last;
        s += e * e;
        ++n;
      }
    }
  }
  return s / static_cast<double>(n);
}

/// Per-variable least squares from the look-back window (plus intercept) to
/// every horizon step, fitted on train windows.
double linear_mse(const WindowedDataset& w, Split split) {
  const std::size_t lb = w.lookback(), h = w.horizon();
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < w.vars(); ++v) {
    const std::size_t m = w.window_count(Split::train);
    Eigen::MatrixXd x(m, lb + 1), y(m, h);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t start = w.window_start(Split::train, i);
      for (std::size_t j = 0; j < lb; ++j) x(i, j) = w.value(start + j, v);
      x(i, lb) = 1.0;
      for (std::size_t t = 0; t < h; ++t) y(i, t) = w.value(start + lb + t, v);
    }
    const Eigen::MatrixXd coef = x.colPivHouseholderQr().solve(y);
    for (std::size_t i = 0; i < w.window_count(split); ++i) {
      const std::size_t start = w.window_start(split, i);
      Eigen::RowVectorXd row(lb + 1);
      for (std::size_t j = 0; j < lb; ++j) row(j) = w.value(start + j, v);
      row(lb) = 1.0;
      const Eigen::RowVectorXd pred = row * coef;
      for (std::size_t t = 0; t < h; ++t) {
        const double e = pred(t) - w.value(start + lb + t, v);
        s += e * e;
        ++n;
      }
    }
  }
  return s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto entries = run_grad_suite();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  std::size_t failed = 0;
  for (const auto& e : entries) {
    if (!e.result.ok(1e-4)) ++failed;
    if (e.result.max_rel_err >= worst) {
      worst = e.result.max_rel_err;
      worst_name = e.module + "/" + e.name;
    }
  }
  // Negative control: the harness must flag a wrong adjoint.
  GradSuiteOptions faulty;
  faulty.inject_fault = true;
  bool caught = false;
  for (const auto& e : run_grad_suite(faulty))
    if (e.name == "faulty_square") caught = !e.result.ok(1e-4);
  const bool ok = failed == 0 && secs < 60.0 && caught;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("%zu checks, %zu failed, max rel err %.2e (%s), %.1f s, injected fault %s", entries.size(), failed, worst,
              worst_name.c_str(), secs, caught ? "caught" : "MISSED")};
}

Outcome schedule_properties() {
  Rng rng(20240611);
  std::size_t violations = 0;
  std::string first;
  auto fail = [&](const std::string& what) {
    if (violations++ == 0) first = what;
  };
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t length = 2 + rng.below(511);
    const std::size_t p_min = 1 + rng.below(length);
    const std::size_t p_max = p_min + rng.below(length - p_min + 1);
    const std::size_t decay = 2 + rng.below(3);
    const std::size_t layers = 1 + rng.below(5);
    const double alpha = trial < 2 ? static_cast<double>(trial) : rng.uniform();
    const ScaleSchedule s = build_schedule(alpha, length, layers, {p_min, p_max, decay});
    // Closed form: P_base = round-half-up(P_min + alpha (P_max - P_min)), P_l = max(P_min, floor(P_base / decay^l)).
    const auto p_base = static_cast<std::size_t>(std::floor(static_cast<double>(p_min) + alpha * static_cast<double>(p_max - p_min) + 0.5));
    if (s.p_base != p_base) fail(fmt("trial %d: p_base %zu, expected %zu", trial, s.p_base, p_base));
    std::size_t div = 1;
    // A ramp makes each patch element name the time step it came from.
    Tensor ramp({1, 1, length});
    for (std::size_t t = 0; t < length; ++t) ramp[t] = static_cast<double>(t);
    for (std::size_t l = 0; l < layers; ++l, div *= decay) {
      const auto& e = s.layers[l];
      if (e.patch != std::max(p_min, p_base / div)) fail(fmt("trial %d layer %zu: patch %zu", trial, l, e.patch));
      if (e.patch < p_min) fail(fmt("trial %d layer %zu: patch below p_min", trial, l));
      if (l > 0 && e.patch > s.layers[l - 1].patch) fail(fmt("trial %d layer %zu: patch grew", trial, l));
      const Tensor patches = decompose(ramp, e);
      std::vector<bool> seen(length, false);
      for (double v : patches.data()) seen.at(static_cast<std::size_t>(v)) = true;
      for (std::size_t t = 0; t < length; ++t)
        if (!seen[t]) {
          fail(fmt("trial %d layer %zu: step %zu not covered", trial, l, t));
          break;
        }
      // Final index inclusion: the last patch contains the last real step.
      const std::size_t n = patches.dim(2), p = patches.dim(3);
      bool last = false;
      for (std::size_t j = 0; j < p; ++j) last = last || patches[(n - 1) * p + j] == static_cast<double>(length - 1);
      if (!last) fail(fmt("trial %d layer %zu: final step missing from last patch", trial, l));
    }
  }
  return {violations == 0 ? Verdict::pass : Verdict::fail,
          violations == 0 ? std::string("1000 draws: monotone, >= P_min, full coverage, final index included")
                          : fmt("%zu violations; first: %s", violations, first.c_str())};
}

Outcome routing_invariants() {
  Rng rng(77);
  double worst_row = 0.0, worst_mass = 0.0, worst_dense = 0.0;
  std::size_t support_violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    MoeConfig cfg;
    cfg.d_model = 6;
    cfg.horizon = 5;
    cfg.n_scales = 2;
    cfg.n_global = 1 + rng.below(3);
    cfg.n_local = 1 + rng.below(6);
    cfg.top_k = 1 + rng.below(cfg.n_local);
    Rng init(1000 + trial);
    AsrMoe moe(cfg, init);
    const std::size_t b = 1 + rng.below(4), c = 1 + rng.below(3);
    const double spread = rng.uniform(0.1, 6.0);
    std::vector<Tensor> feats;
    for (std::size_t l = 0; l < cfg.n_scales; ++l) {
      Tensor f({b, c, cfg.d_model});
      for (auto& v : f.data()) v = rng.uniform(-spread, spread);
      feats.push_back(f);
    }
    NoGradGuard no_grad;
    const auto out = moe.forward(feats);
    const std::size_t e = cfg.n_global + cfg.n_local;
    for (const auto& r : out.routes)
      for (std::size_t i = 0; i < b; ++i) {
        double row = 0.0, local = 0.0, kept = 0.0;
        std::size_t support = 0;
        for (std::size_t j = 0; j < e; ++j) row += r.omega[i * e + j];
        for (std::size_t n = 0; n < cfg.n_local; ++n) {
          local += r.omega_local[i * cfg.n_local + n];
          kept += r.local_hat[i * cfg.n_local + n];
          support += r.local_hat[i * cfg.n_local + n] != 0.0;
        }
        worst_row = std::max(worst_row, std::abs(row - 1.0));
        worst_mass = std::max(worst_mass, std::abs(kept - local));
        support_violations += support > cfg.top_k;
      }

    // Dense oracle at K = N_loc: softmax of the router logits by hand and
    // every expert on every row.
    MoeConfig full = cfg;
    full.top_k = full.n_local;
    Rng init_full(5000 + trial);
    AsrMoe dense(full, init_full);
    const auto got = dense.forward(feats);
    const std::size_t h = full.horizon, s = feats.size();
    std::vector<double> ref(b * c * h, 0.0);
    for (std::size_t l = 0; l < s; ++l) {
      const Tensor logits = dense.router()(mean(feats[l], {1}));
      std::vector<Tensor> outs;
      for (std::size_t m = 0; m < full.n_global; ++m) outs.push_back(dense.global_expert(m)(feats[l]));
      for (std::size_t n = 0; n < full.n_local; ++n) outs.push_back(dense.local_expert(n)(feats[l]));
      for (std::size_t i = 0; i < b; ++i) {
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j < e; ++j) mx = std::max(mx, logits[i * e + j]);
        for (std::size_t j = 0; j < e; ++j) z += std::exp(logits[i * e + j] - mx);
        for (std::size_t j = 0; j < e; ++j) {
          const double weight = std::exp(logits[i * e + j] - mx) / z * got.scale_weights[i * s + l];
          for (std::size_t k = 0; k < c * h; ++k) ref[i * c * h + k] += weight * outs[j][i * c * h + k];
        }
      }
    }
    for (std::size_t k = 0; k < ref.size(); ++k) worst_dense = std::max(worst_dense, std::abs(got.prediction[k] - ref[k]));
  }
  const bool ok = worst_row <= 1e-9 && worst_mass <= 1e-9 && support_violations == 0 && worst_dense <= 1e-12;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("1000 inputs: max |row sum - 1| %.1e, max local mass drift %.1e, support > K: %zu, sparse vs dense %.1e",
              worst_row, worst_mass, support_violations, worst_dense)};
}

Outcome balance_analytics() {
  const double lambda = 0.01;
  MoeConfig cfg;
  cfg.d_model = 4;
  cfg.horizon = 2;
  cfg.balance_lambda = lambda;
  Rng rng(3);
  AsrMoe moe(cfg, rng);
  double worst = 0.0;
  for (std::size_t e : {2u, 4u, 8u}) {
    RouteResult r;
    r.omega = Tensor({5, e}, 1.0 / static_cast<double>(e));
    worst = std::max(worst, std::abs(moe.balance_loss({r, r, r}).item() - lambda * std::log(static_cast<double>(e))));
  }
  double one_hot = 0.0;
  for (std::size_t e : {2u, 4u, 8u}) {
    RouteResult r;
    r.omega = Tensor({e, e});
    for (std::size_t i = 0; i < e; ++i) r.omega[i * e + (i * 3) % e] = 1.0;
    one_hot = std::max(one_hot, std::abs(moe.balance_loss({r}).item()));
  }
  const bool ok = worst <= 1e-12 && one_hot == 0.0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("uniform E in {2,4,8}: max |L - lambda ln E| %.1e; one-hot: %.1e", worst, one_hot)};
}

/// Trains `cfg` and scores the model against both baselines on `split`.
struct BaselineComparison {
  double model = 0.0, persistence = 0.0, linear = 0.0, seconds = 0.0;
  std::size_t epochs = 0;
};

BaselineComparison train_and_compare(const RunConfig& cfg, Split split) {
  const auto t0 = Clock::now();
  const LoadedData data = load_data(cfg);
  Rng rng(cfg.train.seed);
  Model model(resolve_model(cfg, data.frame.vars()), rng);
  const TrainResult res = train(model, data.windows, cfg.train);
  BaselineComparison out;
  out.epochs = res.log.size();
  EvalOptions eo;
  eo.batch_size = cfg.train.eval_batch;
  out.model = evaluate(model, data.windows, split, eo).mse;
  out.seconds = seconds_since(t0);
  out.persistence = persistence_mse(data.windows, split);
  out.linear = linear_mse(data.windows, split);
  return out;
}

Outcome desk_scale_training() {
  RunConfig cfg;  // defaults: 3 synthetic variables, length 4000, t = 96, horizon 96
  cfg.train.epochs = 10;
  const auto r = train_and_compare(cfg, Split::val);
  const bool ok = r.model < r.persistence && r.model < r.linear && r.seconds <= 600.0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("val MSE %.5f vs persistence %.5f, linear %.5f; %zu epochs in %.0f s", r.model, r.persistence, r.linear,
              r.epochs, r.seconds)};
}

Outcome etth1_smoke() {
  std::vector<fs::path> candidates;
  if (const char* env = std::getenv("DMSC_ETTH1")) candidates.emplace_back(env);
  candidates.emplace_back(fs::path(DMSC_SOURCE_DIR) / "data" / "ETTh1.csv");
  fs::path path;
  for (const auto& c : candidates)
    if (fs::exists(c)) {
      path = c;
      break;
    }
  if (path.empty()) return {Verdict::skip, "ETTh1.csv not available (set DMSC_ETTH1 or place it at data/ETTh1.csv)"};
  RunConfig cfg;
  cfg.data.source = path.string();
  cfg.data.name = "ETTh1";
  cfg.model.d_model = 64;
  cfg.model.n_layers = 3;
  cfg.train.epochs = 5;
  const LoadedData probe = load_data(cfg);
  const auto counts = lookback_counts(probe.windows.sizes(), cfg.model.lookback);
  const auto r = train_and_compare(cfg, Split::test);
  const bool split_ok = counts[0] == 8545 && counts[1] == 2881 && counts[2] == 2881;
  const bool ok = split_ok && r.model < r.persistence;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("split %zu/%zu/%zu; test MSE %.4f vs persistence %.4f (linear %.4f); %.0f s", counts[0], counts[1], counts[2],
              r.model, r.persistence, r.linear, r.seconds)};
}

Outcome scaling() {
  setenv("DMSC_THREADS", "1", 1);
  const auto t0 = Clock::now();
  const ScalingReport rep = bench_lengths(BenchOptions{});
  const double secs = seconds_since(t0);
  std::string pts;
  for (const auto& p : rep.points) pts += fmt(" L=%zu:%.1fms", p.size, p.mean_s * 1e3);
  const bool ok = rep.slope < 1.3 && secs <= 300.0;
  return {ok ? Verdict::pass : Verdict::fail, fmt("log-log slope %.3f;%s; %.0f s", rep.slope, pts.c_str(), secs)};
}

// Reduced width and epoch budget so the twelve runs fit a desk budget.
RunConfig ablation_config(Variant v, std::uint64_t seed) {
  RunConfig cfg;
  cfg.model.d_model = 32;
  cfg.model.variant = v;
  cfg.train.epochs = 8;
  cfg.train.seed = seed;
  return cfg;
}

Outcome ablation_direction() {
  const std::vector<Variant> variants{Variant::full, Variant::intra_only, Variant::agg_heads, Variant::static_decomp};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::pair<Variant, std::uint64_t>> jobs;
  for (auto s : seeds)
    for (auto v : variants) jobs.emplace_back(v, s);
  std::vector<double> val(jobs.size(), 0.0);
  std::vector<std::string> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  const auto t0 = Clock::now();
  auto worker = [&] {
    for (std::size_t j; (j = next++) < jobs.size();) {
      try {
        const RunConfig cfg = ablation_config(jobs[j].first, jobs[j].second);
        const LoadedData data = load_data(cfg);
        Rng rng(cfg.train.seed);
        Model model(resolve_model(cfg, data.frame.vars()), rng);
        val[j] = train(model, data.windows, cfg.train).best_val_mse;
      } catch (const std::exception& e) {
        errors[j] = e.what();
      }
    }
  };
  // Runs are independent and individually deterministic, so they can share the cores.
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(jobs.size(), worker_count()); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) return {Verdict::fail, "run failed: " + e};

  std::string detail;
  bool ok = true;
  for (std::size_t k = 1; k < variants.size(); ++k) {
    int wins = 0;
    for (std::size_t si = 0; si < seeds.size(); ++si) wins += val[si * variants.size()] <= val[si * variants.size() + k];
    ok = ok && wins >= 2;
    detail += fmt("%s %d/3; ", variant_name(variants[k]).data(), wins);
  }
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    detail += fmt("seed %llu:", static_cast<unsigned long long>(seeds[si]));
    for (std::size_t k = 0; k < variants.size(); ++k) detail += fmt(" %.5f", val[si * variants.size() + k]);
    detail += "; ";
  }
  detail += fmt("%.0f s", seconds_since(t0));
  return {ok ? Verdict::pass : Verdict::fail, "full <= variant in " + detail};
}

Outcome determinism() {
  RunConfig cfg;
  cfg.data.synth.n_vars = 3;
  cfg.data.synth.length = 1200;
  cfg.model.d_model = 16;
  cfg.train.epochs = 3;
  const fs::path root = fs::temp_directory_path() / ("dmsc_accept_det_" + std::to_string(::getpid()));
  fs::remove_all(root);
  auto run_once = [&](const std::string& name, const char* threads) {
    setenv("DMSC_THREADS", threads, 1);
    RunOptions opt;
    opt.out_dir = root / name;
    run_training(cfg, opt);
    std::ifstream in(opt.out_dir / "metrics.csv", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string a = run_once("a", "4"), b = run_once("b", "4"), c = run_once("c", "1");
  unsetenv("DMSC_THREADS");
  fs::remove_all(root);
  const bool ok = !a.empty() && a == b;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("identical runs %s (%zu bytes); 1-thread eval run %s", a == b ? "bitwise identical" : "DIFFER", a.size(),
              a == c ? "also identical" : "differs")};
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {1, "gradient suite", gradient_suite},
      {2, "schedule properties", schedule_properties},
      {3, "routing invariants", routing_invariants},
      {4, "balance-loss analytics", balance_analytics},
      {5, "desk-scale training beats baselines", desk_scale_training},
      {6, "ETTh1 smoke run", etth1_smoke},
      {7, "linear scaling in L", scaling},
      {8, "ablation direction", ablation_direction},
      {9, "determinism", determinism},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
      return 2;
    }
  }
  bool any_fail = false, any_run = false;
  for (const auto& c : criteria()) {
    if (only && c.id != only) continue;
    any_run = true;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Verdict::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::fail ? "FAIL" : "SKIP";
    std::printf("criterion %d [%s] %s: %s\n", c.id, tag, c.title, o.detail.c_str());
    std::fflush(stdout);
    any_fail = any_fail || o.verdict == Verdict::fail;
    if (only && o.verdict == Verdict::skip) return 77;
  }
  if (!any_run) {
    std::fprintf(stderr, "no criterion %d\n", only);
    return 2;
  }
  return any_fail ? 1 : 0;
}
