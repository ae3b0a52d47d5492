#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmsc/data.hpp"
#include "dmsc/model.hpp"
#include "dmsc/train.hpp"

namespace dmsc {

/// Where the series comes from and how it is split.
struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or a CSV path
  std::string name;                  // named split table entry (e.g. ETTh1)
  double train_frac = 0.7;
  double test_frac = 0.2;
  std::size_t max_rows = 0;  // 0 = use the whole file
  SynthSpec synth;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainOptions train;
  bool raw_metrics = false;
};

/// Field-level configuration error, e.g. "model.d_model: expected a positive integer".
class ConfigFieldError : public ConfigError {
 public:
  ConfigFieldError(const std::string& field, const std::string& what) : ConfigError(field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v, bool allow_zero = false) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || (!allow_zero && out == 0))
    throw ConfigFieldError(key, std::string("expected a ") + (allow_zero ? "non-negative" : "positive") +
                                    " integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  const auto d = parse_double(v);
  if (!d || !std::isfinite(*d)) throw ConfigFieldError(key, "expected a number, got '" + v + "'");
  return *d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const std::string s = lower(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigFieldError(key, "expected true/false, got '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (auto f : split_fields(v)) out.push_back(parse_real(key, std::string(f)));
  return out;
}

template <class T>
std::string fmt(const T& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

}  // namespace detail

/// Applies one `section.key = value` assignment.
inline void set_field(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  auto& m = c.model;
  auto& t = c.train;
  auto& d = c.data;
  auto& s = c.data.synth;
  const std::map<std::string, std::function<void(const std::string&)>> setters{
      {"data.source", [&](const std::string& v) { d.source = v; }},
      {"data.name", [&](const std::string& v) { d.name = v; }},
      {"data.train_frac", [&](const std::string& v) { d.train_frac = parse_real(key, v); }},
      {"data.test_frac", [&](const std::string& v) { d.test_frac = parse_real(key, v); }},
      {"data.max_rows", [&](const std::string& v) { d.max_rows = parse_size(key, v, true); }},
      {"data.lookback", [&](const std::string& v) { m.lookback = parse_size(key, v); }},
      {"data.horizon", [&](const std::string& v) { m.horizon = parse_size(key, v); }},
      {"data.raw_metrics", [&](const std::string& v) { c.raw_metrics = parse_bool(key, v); }},
      {"synthetic.n_vars", [&](const std::string& v) { s.n_vars = parse_size(key, v); }},
      {"synthetic.length", [&](const std::string& v) { s.length = parse_size(key, v); }},
      {"synthetic.slope", [&](const std::string& v) { s.slope = parse_real(key, v); }},
      {"synthetic.noise", [&](const std::string& v) { s.noise = parse_real(key, v); }},
      {"synthetic.phase_step", [&](const std::string& v) { s.phase_step = parse_real(key, v); }},
      {"synthetic.seed", [&](const std::string& v) { s.seed = parse_size(key, v, true); }},
      {"synthetic.periods",
       [&](const std::string& v) {
         const auto p = parse_list(key, v);
         s.components.resize(p.size());
         for (std::size_t i = 0; i < p.size(); ++i) s.components[i].period = p[i];
       }},
      {"synthetic.amplitudes",
       [&](const std::string& v) {
         const auto a = parse_list(key, v);
         if (a.size() != s.components.size()) throw ConfigFieldError(key, "needs one entry per period");
         for (std::size_t i = 0; i < a.size(); ++i) s.components[i].amplitude = a[i];
       }},
      {"synthetic.phases",
       [&](const std::string& v) {
         const auto a = parse_list(key, v);
         if (a.size() != s.components.size()) throw ConfigFieldError(key, "needs one entry per period");
         for (std::size_t i = 0; i < a.size(); ++i) s.components[i].phase = a[i];
       }},
      {"model.variant",
       [&](const std::string& v) {
         try {
           m.variant = parse_variant(v);
         } catch (const ConfigError& e) {
           throw ConfigFieldError(key, e.what());
         }
       }},
      {"model.d_model", [&](const std::string& v) { m.d_model = parse_size(key, v); }},
      {"model.n_layers", [&](const std::string& v) { m.n_layers = parse_size(key, v); }},
      {"model.p_min", [&](const std::string& v) { m.bounds.p_min = parse_size(key, v); }},
      {"model.p_max", [&](const std::string& v) { m.bounds.p_max = parse_size(key, v); }},
      {"model.decay", [&](const std::string& v) { m.bounds.decay = parse_size(key, v); }},
      {"model.kernel", [&](const std::string& v) { m.kernel = parse_size(key, v); }},
      {"model.dilation", [&](const std::string& v) { m.dilation = parse_size(key, v); }},
      {"model.n_global", [&](const std::string& v) { m.n_global = parse_size(key, v, true); }},
      {"model.n_local", [&](const std::string& v) { m.n_local = parse_size(key, v, true); }},
      {"model.top_k", [&](const std::string& v) { m.top_k = parse_size(key, v); }},
      {"model.balance_lambda", [&](const std::string& v) { m.balance_lambda = parse_real(key, v); }},
      {"model.balance_sign_flip", [&](const std::string& v) { m.balance_sign_flip = parse_bool(key, v); }},
      {"model.fixed_patch", [&](const std::string& v) { m.fixed_patch = parse_size(key, v, true); }},
      {"model.instance_norm", [&](const std::string& v) { m.instance_norm = parse_bool(key, v); }},
      {"train.epochs", [&](const std::string& v) { t.epochs = parse_size(key, v, true); }},
      {"train.batch_size", [&](const std::string& v) { t.batch_size = parse_size(key, v); }},
      {"train.lr", [&](const std::string& v) { t.lr = parse_real(key, v); }},
      {"train.patience", [&](const std::string& v) { t.patience = parse_size(key, v); }},
      {"train.seed", [&](const std::string& v) { t.seed = parse_size(key, v, true); }},
      {"train.lr_halving", [&](const std::string& v) { t.lr_halving = parse_bool(key, v); }},
      {"train.clip_norm", [&](const std::string& v) { t.clip_norm = parse_real(key, v); }},
      {"train.eval_batch", [&](const std::string& v) { t.eval_batch = parse_size(key, v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigFieldError(key, "unknown field");
  it->second(value);
}

/// Cross-field checks that do not need the data.
inline void validate(const RunConfig& c) {
  const auto& m = c.model;
  if (m.bounds.decay < 2) throw ConfigFieldError("model.decay", "must be >= 2");
  if (m.bounds.p_min > m.bounds.p_max) throw ConfigFieldError("model.p_min", "exceeds model.p_max");
  if (m.bounds.p_min > m.lookback) throw ConfigFieldError("model.p_min", "exceeds data.lookback");
  if (m.n_local > 0 && m.top_k > m.n_local) throw ConfigFieldError("model.top_k", "exceeds model.n_local");
  if (m.n_global + m.n_local == 0) throw ConfigFieldError("model.n_global", "need at least one expert");
  if (m.balance_lambda < 0) throw ConfigFieldError("model.balance_lambda", "must be >= 0");
  if (!(c.train.lr > 0)) throw ConfigFieldError("train.lr", "must be positive");
  if (c.train.clip_norm < 0) throw ConfigFieldError("train.clip_norm", "must be >= 0");
  if (c.data.name.empty() && (c.data.train_frac <= 0 || c.data.test_frac < 0 || c.data.train_frac + c.data.test_frac >= 1))
    throw ConfigFieldError("data.train_frac", "fractions must satisfy 0 < train, 0 <= test, train + test < 1");
  if (c.data.source == "synthetic" && c.data.synth.noise < 0) throw ConfigFieldError("synthetic.noise", "must be >= 0");
}

/// Parses `[section]` headers and `key = value` lines; `#` and `;` start comments.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    std::string_view s = detail::trim(std::string_view(line).substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = std::string(detail::trim(s.substr(1, s.size() - 2)));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = std::string(detail::trim(s.substr(0, eq)));
    const std::string value = std::string(detail::trim(s.substr(eq + 1)));
    set_field(base, section.empty() ? key : section + "." + key, value);
  }
  validate(base);
  return base;
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, std::move(base));
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigFieldError("--config", "cannot open '" + path.string() + "'");
  return parse_config(in);
}

/// Canonical text form; parse_config_text(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig& c) {
  using detail::fmt;
  const auto& d = c.data;
  const auto& s = d.synth;
  const auto& m = c.model;
  const auto& t = c.train;
  std::vector<double> periods, amps, phases;
  for (const auto& comp : s.components) {
    periods.push_back(comp.period);
    amps.push_back(comp.amplitude);
    phases.push_back(comp.phase);
  }
  std::ostringstream os;
  os << "[data]\nsource = " << d.source << "\n";
  if (!d.name.empty()) os << "name = " << d.name << "\n";
  os << "train_frac = " << fmt(d.train_frac) << "\ntest_frac = " << fmt(d.test_frac) << "\nmax_rows = " << d.max_rows
     << "\nlookback = " << m.lookback << "\nhorizon = " << m.horizon << "\nraw_metrics = " << (c.raw_metrics ? "true" : "false")
     << "\n\n[synthetic]\nn_vars = " << s.n_vars << "\nlength = " << s.length
     << "\nperiods = " << detail::fmt_list(periods) << "\namplitudes = " << detail::fmt_list(amps)
     << "\nphases = " << detail::fmt_list(phases) << "\nphase_step = " << fmt(s.phase_step)
     << "\nslope = " << fmt(s.slope) << "\nnoise = " << fmt(s.noise) << "\nseed = " << s.seed
     << "\n\n[model]\nvariant = " << variant_name(m.variant) << "\nd_model = " << m.d_model << "\nn_layers = " << m.n_layers
     << "\np_min = " << m.bounds.p_min << "\np_max = " << m.bounds.p_max << "\ndecay = " << m.bounds.decay
     << "\nkernel = " << m.kernel << "\ndilation = " << m.dilation << "\nn_global = " << m.n_global
     << "\nn_local = " << m.n_local << "\ntop_k = " << m.top_k << "\nbalance_lambda = " << fmt(m.balance_lambda)
     << "\nbalance_sign_flip = " << (m.balance_sign_flip ? "true" : "false") << "\nfixed_patch = " << m.fixed_patch
     << "\ninstance_norm = " << (m.instance_norm ? "true" : "false") << "\n\n[train]\nepochs = " << t.epochs
     << "\nbatch_size = " << t.batch_size << "\nlr = " << fmt(t.lr) << "\npatience = " << t.patience
     << "\nseed = " << t.seed << "\nlr_halving = " << (t.lr_halving ? "true" : "false")
     << "\nclip_norm = " << fmt(t.clip_norm) << "\neval_batch = " << t.eval_batch << "\n";
  return os.str();
}

/// Loaded series plus the name used to pick its split.
struct LoadedData {
  SeriesFrame frame;
  WindowedDataset windows;
  std::string identity;  // "synthetic" or the file path
};

inline LoadedData load_data(const RunConfig& c) {
  LoadedData out;
  if (c.data.source == "synthetic") {
    out.frame = synth_series(c.data.synth);
    out.identity = "synthetic";
  } else {
    if (!std::filesystem::exists(c.data.source)) throw ConfigFieldError("data.source", "no such file '" + c.data.source + "'");
    out.frame = load_csv(c.data.source);
    out.identity = c.data.source;
  }
  if (c.data.max_rows > 0 && c.data.max_rows < out.frame.rows()) {
    out.frame.timestamps.resize(c.data.max_rows);
    out.frame.values.resize(c.data.max_rows * out.frame.vars());
  }
  SplitSizes sizes;
  if (!c.data.name.empty()) {
    const auto named = named_split(c.data.name, out.frame.rows());
    if (!named) throw ConfigFieldError("data.name", "no split table for '" + c.data.name + "'");
    sizes = *named;
  } else {
    sizes = fraction_split(out.frame.rows(), c.data.train_frac, c.data.test_frac);
  }
  out.windows = WindowedDataset(out.frame, sizes, c.model.lookback, c.model.horizon);
  return out;
}

/// Model config with the variable count taken from the data.
inline ModelConfig resolve_model(const RunConfig& c, std::size_t n_vars) {
  ModelConfig m = c.model;
  m.n_vars = n_vars;
  return m;
}

}  // namespace dmsc
