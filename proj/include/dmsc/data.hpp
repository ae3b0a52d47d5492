#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dmsc/rng.hpp"
#include "dmsc/tensor.hpp"

namespace dmsc {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Time-ordered multivariate series, values row-major [T, C].
struct SeriesFrame {
  std::vector<std::string> timestamps;
  std::vector<std::string> names;
  std::vector<double> values;

  std::size_t rows() const { return timestamps.size(); }
  std::size_t vars() const { return names.size(); }
  double at(std::size_t t, std::size_t c) const { return values[t * names.size() + c]; }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) return out;
    start = comma + 1;
  }
}

inline std::optional<double> parse_double(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

// Numeric timestamps compare numerically, anything else lexicographically
// (ISO-8601 strings sort chronologically).
inline bool strictly_before(const std::string& a, const std::string& b) {
  const auto na = parse_double(a), nb = parse_double(b);
  if (na && nb) return *na < *nb;
  return a < b;
}

}  // namespace detail

/// Header row, timestamp column first, numeric columns after. Missing or
/// non-numeric cells and non-increasing timestamps are rejected.
inline SeriesFrame parse_csv(std::istream& in, const std::string& source = "<csv>") {
  SeriesFrame f;
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  for (auto h : detail::split_fields(line)) header.emplace_back(h);
  if (header.size() < 2) throw DataError(source + ": need a timestamp column and at least one variable");
  for (std::size_t i = 1; i < header.size(); ++i) f.names.emplace_back(header[i]);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_fields(line);
    if (cells.size() != header.size())
      throw DataError(source + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " fields, expected " + std::to_string(header.size()));
    std::string ts(cells[0]);
    if (!f.timestamps.empty() && !detail::strictly_before(f.timestamps.back(), ts))
      throw DataError(source + ": row " + std::to_string(row) + " timestamp '" + ts + "' does not follow '" +
                      f.timestamps.back() + "'");
    for (std::size_t c = 1; c < cells.size(); ++c) {
      const auto v = detail::parse_double(cells[c]);
      if (!v || !std::isfinite(*v))
        throw DataError(source + ": row " + std::to_string(row) + ", column " + std::to_string(c + 1) + " ('" +
                        header[c] + "'): not a number: '" + std::string(cells[c]) + "'");
      f.values.push_back(*v);
    }
    f.timestamps.push_back(std::move(ts));
  }
  if (f.timestamps.empty()) throw DataError(source + ": no data rows");
  return f;
}

inline SeriesFrame load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  return parse_csv(in, path.string());
}

/// FNV-1a over names, timestamps and the value bytes.
inline std::uint64_t frame_hash(const SeriesFrame& f) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& n : f.names) mix(n.data(), n.size() + 1);
  for (const auto& t : f.timestamps) mix(t.data(), t.size() + 1);
  mix(f.values.data(), f.values.size() * sizeof(double));
  return h;
}

struct SineComponent {
  double amplitude = 1.0;
  double period = 24.0;
  double phase = 0.0;
};

struct SynthSpec {
  std::size_t n_vars = 3;
  std::size_t length = 4000;
  std::vector<SineComponent> components{{1.0, 24.0, 0.0}, {0.5, 72.0, 0.0}};
  double phase_step = 0.7;  // extra phase per variable index
  double slope = 5e-4;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

/// Noise-free value of variable `v` at step `i`.
inline double synth_signal(const SynthSpec& s, std::size_t v, std::size_t i) {
  double y = s.slope * static_cast<double>(i);
  for (const auto& c : s.components)
    y += c.amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / c.period + c.phase +
                                static_cast<double>(v) * s.phase_step);
  return y;
}

inline SeriesFrame synth_series(const SynthSpec& s) {
  if (s.length == 0 || s.n_vars == 0) throw ConfigError("synthetic series needs length > 0 and n_vars > 0");
  for (const auto& c : s.components)
    if (!(c.period > 0)) throw ConfigError("sine period must be positive");
  SeriesFrame f;
  for (std::size_t v = 0; v < s.n_vars; ++v) f.names.push_back("v" + std::to_string(v));
  Rng rng(s.seed);
  f.values.resize(s.length * s.n_vars);
  for (std::size_t i = 0; i < s.length; ++i) {
    f.timestamps.push_back(std::to_string(i));
    for (std::size_t v = 0; v < s.n_vars; ++v) f.values[i * s.n_vars + v] = synth_signal(s, v, i) + s.noise * rng.normal();
  }
  return f;
}

/// Chronological row counts. Val/test windows borrow look-back rows from the
/// split before them.
struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  std::size_t total() const { return train + val + test; }
  bool operator==(const SplitSizes&) const = default;
};

inline SplitSizes fraction_split(std::size_t rows, double train_frac, double test_frac) {
  if (!(train_frac > 0) || !(test_frac >= 0) || train_frac + test_frac >= 1.0)
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= test, train + test < 1");
  SplitSizes s;
  s.train = static_cast<std::size_t>(train_frac * static_cast<double>(rows));
  s.test = static_cast<std::size_t>(test_frac * static_cast<double>(rows));
  s.val = rows - s.train - s.test;
  return s;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

/// Conventional benchmark splits: ETT files use fixed 12/4/4-month row counts,
/// the others 70/10/20 percent of the file.
inline std::optional<SplitSizes> named_split(std::string_view name, std::size_t rows) {
  const std::string n = lower(name);
  if (n == "etth1" || n == "etth2") return SplitSizes{12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24};
  if (n == "ettm1" || n == "ettm2") return SplitSizes{12 * 30 * 24 * 4, 4 * 30 * 24 * 4, 4 * 30 * 24 * 4};
  static constexpr std::array<std::string_view, 6> custom{"electricity", "ecl", "traffic", "weather", "exchange", "solar"};
  if (std::find(custom.begin(), custom.end(), n) != custom.end()) return fraction_split(rows, 0.7, 0.2);
  return std::nullopt;
}

/// Look-back positions per split: (train - t + 1, val + 1, test + 1). This is
/// how the benchmark table counts dataset sizes.
inline std::array<std::size_t, 3> lookback_counts(const SplitSizes& s, std::size_t lookback) {
  return {s.train >= lookback ? s.train - lookback + 1 : 0, s.val + 1, s.test + 1};
}

/// Per-variable z-score statistics.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std;

  static constexpr double kFloor = 1e-8;

  static Standardizer fit(const SeriesFrame& f, std::size_t rows) {
    const std::size_t c = f.vars();
    if (rows == 0 || rows > f.rows()) throw ConfigError("cannot fit normalization on " + std::to_string(rows) + " rows");
    Standardizer s;
    s.mean.assign(c, 0.0);
    s.std.assign(c, 0.0);
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t v = 0; v < c; ++v) s.mean[v] += f.at(t, v);
    for (auto& m : s.mean) m /= static_cast<double>(rows);
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t v = 0; v < c; ++v) {
        const double d = f.at(t, v) - s.mean[v];
        s.std[v] += d * d;
      }
    for (auto& sd : s.std) sd = std::max(std::sqrt(sd / static_cast<double>(rows)), kFloor);
    return s;
  }

  double normalize(double x, std::size_t v) const { return (x - mean[v]) / std[v]; }
  double denormalize(double z, std::size_t v) const { return z * std[v] + mean[v]; }
};

enum class Split { train, val, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(s) + "' (train, val, test)");
}

struct Batch {
  Tensor x;  // [B, C, lookback]
  Tensor y;  // [B, C, horizon]
};

/// Normalized series cut into (look-back, horizon) windows per split.
class WindowedDataset {
 public:
  WindowedDataset() = default;
  WindowedDataset(const SeriesFrame& frame, SplitSizes sizes, std::size_t lookback, std::size_t horizon)
      : sizes_(sizes), lookback_(lookback), horizon_(horizon), vars_(frame.vars()) {
    if (lookback == 0 || horizon == 0) throw ConfigError("lookback and horizon must be positive");
    if (sizes.total() > frame.rows())
      throw ConfigError("split needs " + std::to_string(sizes.total()) + " rows, series has " +
                        std::to_string(frame.rows()));
    if (lookback + horizon > sizes.train)
      throw ConfigError("lookback + horizon (" + std::to_string(lookback + horizon) + ") exceeds train rows (" +
                        std::to_string(sizes.train) + ")");
    if (sizes.val < horizon || sizes.test < horizon)
      throw ConfigError("val and test splits must each hold at least one horizon (" + std::to_string(horizon) + ")");
    stats_ = Standardizer::fit(frame, sizes.train);
    const std::size_t rows = sizes.total();
    data_.resize(rows * vars_);
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t v = 0; v < vars_; ++v) data_[t * vars_ + v] = stats_.normalize(frame.at(t, v), v);
  }

  static WindowedDataset from_name(const SeriesFrame& frame, std::string_view name, std::size_t lookback,
                                   std::size_t horizon) {
    const auto sizes = named_split(name, frame.rows());
    if (!sizes) throw ConfigError("no split table for dataset '" + std::string(name) + "'; give split fractions");
    return WindowedDataset(frame, *sizes, lookback, horizon);
  }

  std::size_t lookback() const { return lookback_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t vars() const { return vars_; }
  const SplitSizes& sizes() const { return sizes_; }
  const Standardizer& stats() const { return stats_; }
  const std::vector<double>& normalized() const { return data_; }

  /// First row of the split's target region and its length.
  std::pair<std::size_t, std::size_t> target_range(Split s) const {
    switch (s) {
      case Split::train: return {0, sizes_.train};
      case Split::val: return {sizes_.train, sizes_.val};
      default: return {sizes_.train + sizes_.val, sizes_.test};
    }
  }

  std::size_t window_count(Split s) const {
    if (s == Split::train) return sizes_.train - lookback_ - horizon_ + 1;
    return target_range(s).second - horizon_ + 1;
  }

  /// Row where window `i` of split `s` starts its look-back.
  std::size_t window_start(Split s, std::size_t i) const {
    if (i >= window_count(s)) throw std::out_of_range("window index out of range");
    return s == Split::train ? i : target_range(s).first - lookback_ + i;
  }

  double value(std::size_t row, std::size_t var) const { return data_[row * vars_ + var]; }

  Batch batch(Split s, const std::vector<std::size_t>& windows) const {
    const std::size_t b = windows.size();
    Batch out{Tensor({b, vars_, lookback_}), Tensor({b, vars_, horizon_})};
    for (std::size_t k = 0; k < b; ++k) {
      const std::size_t start = window_start(s, windows[k]);
      for (std::size_t v = 0; v < vars_; ++v) {
        for (std::size_t t = 0; t < lookback_; ++t) out.x[(k * vars_ + v) * lookback_ + t] = value(start + t, v);
        for (std::size_t t = 0; t < horizon_; ++t)
          out.y[(k * vars_ + v) * horizon_ + t] = value(start + lookback_ + t, v);
      }
    }
    return out;
  }

 private:
  SplitSizes sizes_;
  std::size_t lookback_ = 0;
  std::size_t horizon_ = 0;
  std::size_t vars_ = 0;
  Standardizer stats_;
  std::vector<double> data_;
};

}  // namespace dmsc
