#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <tuple>
#include <thread>
#include <vector>

#include "dmsc/data.hpp"
#include "dmsc/model.hpp"
#include "dmsc/optim.hpp"

namespace dmsc {

/// Worker cap: DMSC_THREADS if set and positive, else the hardware count.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DMSC_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = static_cast<std::size_t>(v);
  }
  return n;
}

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t count = 0;  // scored elements
};

/// Squared and absolute error sums over matching arrays.
inline std::pair<double, double> error_sums(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeError("prediction and target sizes differ");
  double s2 = 0.0, s1 = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    s2 += e * e;
    s1 += std::abs(e);
  }
  return {s2, s1};
}

inline Metrics score(std::span<const double> pred, std::span<const double> target) {
  if (pred.empty()) throw ConfigError("cannot score an empty prediction");
  const auto [s2, s1] = error_sums(pred, target);
  const double n = static_cast<double>(pred.size());
  return {s2 / n, s1 / n, pred.size()};
}

struct EvalOptions {
  std::size_t batch_size = 64;
  bool raw_scale = false;  // score in original units instead of z-scores
  std::size_t workers = 0;  // 0 = worker_count()
};

/// MSE and MAE over every window and element of a split. Parameters and the
/// scale-weight memory are only read. Batches are reduced in a fixed order, so
/// the result does not depend on the worker count.
inline Metrics evaluate(const Model& model, const WindowedDataset& data, Split split, const EvalOptions& opt = {}) {
  const std::size_t n = data.window_count(split);
  if (n == 0) throw ConfigError("split '" + std::string(split_name(split)) + "' has no windows");
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  const std::size_t n_batches = (n + bs - 1) / bs;
  std::vector<double> sse(n_batches, 0.0), sae(n_batches, 0.0);
  const std::size_t c = data.vars(), h = data.horizon();
  auto run = [&](std::size_t first, std::size_t last) {
    NoGradGuard no_grad;
    for (std::size_t k = first; k < last; ++k) {
      std::vector<std::size_t> idx;
      for (std::size_t i = k * bs; i < std::min(n, (k + 1) * bs); ++i) idx.push_back(i);
      const Batch b = data.batch(split, idx);
      Tensor pred = model.forward(b.x).prediction;
      Tensor y = b.y;
      if (opt.raw_scale) {
        pred = pred.clone();
        for (std::size_t i = 0; i < pred.size(); ++i) {
          const std::size_t v = (i / h) % c;
          pred[i] = data.stats().denormalize(pred[i], v);
          y[i] = data.stats().denormalize(y[i], v);
        }
      }
      std::tie(sse[k], sae[k]) = error_sums(pred.data(), y.data());
    }
  };
  const std::size_t workers = std::min(n_batches, opt.workers ? opt.workers : worker_count());
  if (workers <= 1) {
    run(0, n_batches);
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (n_batches + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back(run, std::min(n_batches, w * per), std::min(n_batches, (w + 1) * per));
    for (auto& t : pool) t.join();
  }
  Metrics m;
  m.count = n * c * h;
  for (std::size_t k = 0; k < n_batches; ++k) {
    m.mse += sse[k];
    m.mae += sae[k];
  }
  m.mse /= static_cast<double>(m.count);
  m.mae /= static_cast<double>(m.count);
  return m;
}

/// Copy of every parameter value plus the scale-weight memory.
struct Snapshot {
  std::vector<std::vector<double>> values;
  std::vector<double> history;

  static Snapshot capture(const Model& model) {
    Snapshot s;
    for (const auto& p : model.parameters()) s.values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    s.history = model.history();
    return s;
  }

  void restore(Model& model) const {
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) std::copy(values[i].begin(), values[i].end(), params[i].tensor.data().begin());
    model.set_history(history);
  }
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t patience = 3;
  std::uint64_t seed = 1;
  bool lr_halving = false;  // halve the learning rate after every epoch
  double clip_norm = 0.0;
  std::size_t eval_batch = 64;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0.0;
  double val_mse = 0.0;
  double val_mae = 0.0;
  double lr = 0.0;
  double elapsed_s = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  std::size_t best_epoch = 0;
  double best_val_mse = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  std::size_t steps = 0;
  double first_batch_mse = 0.0;
};

using StepHook = std::function<void(std::size_t epoch, std::size_t step, const Model::Output&)>;

/// Mini-batch Adam on the train windows with early stopping on val MSE. The
/// best epoch's parameters and memory are restored before returning.
inline TrainResult train(Model& model, const WindowedDataset& data, const TrainOptions& opt,
                         const StepHook& on_step = {}) {
  if (opt.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(opt.lr > 0)) throw ConfigError("lr must be positive");
  TrainResult res;
  if (opt.epochs == 0) return res;
  Adam adam(model.parameters(), {opt.lr, 0.9, 0.999, 1e-8, opt.clip_norm});
  Rng order_rng(opt.seed ^ 0x5eed0f0dULL);
  std::vector<std::size_t> order(data.window_count(Split::train));
  std::iota(order.begin(), order.end(), 0);
  Snapshot best = Snapshot::capture(model);
  std::size_t since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();
  EvalOptions eval;
  eval.batch_size = opt.eval_batch;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    shuffle(order, order_rng);
    double sq = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + opt.batch_size)));
      const Batch b = data.batch(Split::train, idx);
      adam.zero_grad();
      Model::Output out;
      double mse = 0.0;
      {
        Tape tape;
        out = model.forward(b.x);
        const Tensor pred_loss = mean_all(square(sub(out.prediction, b.y)));
        const Tensor loss = add(pred_loss, out.balance);
        mse = pred_loss.item();
        if (!std::isfinite(loss.item())) {
          best.restore(model);
          throw NumericError("loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(res.steps + 1) + "; best parameters restored");
        }
        tape.backward(loss);
      }
      adam.step();
      model.update_history(out);
      if (res.steps == 0) res.first_batch_mse = mse;
      ++res.steps;
      sq += mse * static_cast<double>(idx.size());
      seen += idx.size();
      if (on_step) on_step(epoch, res.steps, out);
    }
    const Metrics val = evaluate(model, data, Split::val, eval);
    EpochMetrics em;
    em.epoch = epoch;
    em.train_mse = sq / static_cast<double>(seen);
    em.val_mse = val.mse;
    em.val_mae = val.mae;
    em.lr = adam.lr();
    em.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(em);
    if (val.mse < res.best_val_mse) {
      res.best_val_mse = val.mse;
      res.best_epoch = epoch;
      best = Snapshot::capture(model);
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      res.early_stopped = epoch < opt.epochs;
      break;
    }
    if (opt.lr_halving) adam.set_lr(adam.lr() * 0.5);
  }
  best.restore(model);
  return res;
}

}  // namespace dmsc
