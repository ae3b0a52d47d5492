#pragma once

#include <sys/resource.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmsc/checkpoint.hpp"
#include "dmsc/config.hpp"

#ifndef DMSC_BUILD_ID
#define DMSC_BUILD_ID "unknown"
#endif

namespace dmsc {

inline constexpr const char* kBuildId = DMSC_BUILD_ID;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Peak resident set size in KiB as reported by getrusage; approximate.
inline long peak_rss_kib() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return u.ru_maxrss;
}

/// Shortest decimal form that round-trips a double.
inline std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(std::ostream& out, const TrainResult& r) {
  out << "epoch,train_mse,val_mse,val_mae,lr\n";
  for (const auto& e : r.log)
    out << e.epoch << ',' << exact(e.train_mse) << ',' << exact(e.val_mse) << ',' << exact(e.val_mae) << ',' << exact(e.lr)
        << '\n';
}

/// Batch-mean router weights and selection frequency for every step, scale
/// and expert. Global experts are always active, so their selected fraction is 1.
class RoutingRecorder {
 public:
  explicit RoutingRecorder(std::ostream& out) : out_(out) {
    out_ << "epoch,step,scale,expert,kind,omega_mean,selected_frac\n";
  }

  void operator()(std::size_t epoch, std::size_t step, const Model::Output& o) {
    for (std::size_t s = 0; s < o.routes.size(); ++s) {
      const auto& r = o.routes[s];
      const std::size_t b = r.omega.dim(0), e = r.omega.dim(1), m = r.omega_global.dim(1);
      for (std::size_t j = 0; j < e; ++j) {
        double w = 0.0, sel = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
          w += r.omega[i * e + j];
          if (j < m) {
            sel += 1.0;
          } else {
            for (std::size_t k : r.selected[i]) sel += k == j - m ? 1.0 : 0.0;
          }
        }
        out_ << epoch << ',' << step << ',' << s << ',' << j << ',' << (j < m ? "global" : "local") << ','
             << exact(w / static_cast<double>(b)) << ',' << exact(sel / static_cast<double>(b)) << '\n';
      }
    }
  }

 private:
  std::ostream& out_;
};

struct RunOptions {
  std::filesystem::path out_dir;
  std::string command = "train";
  bool dump_routing = false;
  bool quiet = false;
};

struct RunSummary {
  TrainResult result;
  std::vector<std::string> artifacts;
  std::size_t parameter_count = 0;
  double total_s = 0.0;
};

inline nlohmann::ordered_json dataset_json(const LoadedData& d) {
  const auto& s = d.windows.sizes();
  return {{"identity", d.identity},
          {"hash_fnv1a64", hex64(frame_hash(d.frame))},
          {"rows", d.frame.rows()},
          {"vars", d.frame.vars()},
          {"split", {{"train", s.train}, {"val", s.val}, {"test", s.test}}},
          {"windows",
           {{"train", d.windows.window_count(Split::train)},
            {"val", d.windows.window_count(Split::val)},
            {"test", d.windows.window_count(Split::test)}}}};
}

/// Trains from `cfg` and writes model.ckpt, metrics.csv, manifest.json (and
/// routing.csv when requested) into `opt.out_dir`.
inline RunSummary run_training(const RunConfig& cfg, const RunOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const LoadedData data = load_data(cfg);
  Rng rng(cfg.train.seed);
  Model model(resolve_model(cfg, data.frame.vars()), rng);
  std::filesystem::create_directories(opt.out_dir);

  RunSummary sum;
  sum.parameter_count = model.parameter_count();
  std::ofstream routing_file;
  std::optional<RoutingRecorder> recorder;
  if (opt.dump_routing && model.routed()) {
    routing_file.open(opt.out_dir / "routing.csv");
    recorder.emplace(routing_file);
  }
  StepHook hook;
  if (recorder) hook = [&](std::size_t e, std::size_t s, const Model::Output& o) { (*recorder)(e, s, o); };
  sum.result = train(model, data.windows, cfg.train, hook);

  save_checkpoint(opt.out_dir / "model.ckpt", cfg, model, data.windows.stats());
  sum.artifacts.push_back("model.ckpt");
  {
    std::ofstream m(opt.out_dir / "metrics.csv");
    write_metrics_csv(m, sum.result);
  }
  sum.artifacts.push_back("metrics.csv");
  if (recorder) sum.artifacts.push_back("routing.csv");
  sum.total_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  for (const auto& e : sum.result.log) epochs.push_back({{"epoch", e.epoch}, {"elapsed_s", e.elapsed_s}});
  nlohmann::ordered_json manifest{
      {"command", opt.command},
      {"variant", variant_name(cfg.model.variant)},
      {"seed", cfg.train.seed},
      {"build_id", kBuildId},
      {"config", to_text(cfg)},
      {"dataset", dataset_json(data)},
      {"parameters", sum.parameter_count},
      {"result",
       {{"epochs_run", sum.result.log.size()},
        {"best_epoch", sum.result.best_epoch},
        {"best_val_mse", sum.result.best_val_mse},
        {"early_stopped", sum.result.early_stopped},
        {"steps", sum.result.steps}}},
      {"timings", {{"total_s", sum.total_s}, {"epochs", epochs}}},
      {"peak_rss_kib_approx", peak_rss_kib()},
      {"artifacts", sum.artifacts}};
  if (opt.dump_routing && !model.routed()) manifest["routing_note"] = "variant has no router; no routing diagnostics";
  std::ofstream(opt.out_dir / "manifest.json") << manifest.dump(2) << '\n';
  return sum;
}

}  // namespace dmsc
