#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmsc/data.hpp"

using namespace dmsc;

namespace {

SeriesFrame parse(const std::string& text) {
  std::istringstream in(text);
  return parse_csv(in);
}

SeriesFrame ramp(std::size_t rows, std::size_t vars) {
  SeriesFrame f;
  for (std::size_t v = 0; v < vars; ++v) f.names.push_back("v" + std::to_string(v));
  for (std::size_t t = 0; t < rows; ++t) {
    f.timestamps.push_back(std::to_string(t));
    for (std::size_t v = 0; v < vars; ++v) f.values.push_back(static_cast<double>(t * (v + 1)) + std::sin(static_cast<double>(t)));
  }
  return f;
}

}  // namespace

TEST(Csv, ParsesToyFile) {
  const auto f = parse("date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3.5,-4\n2020-01-01 02:00:00,5e-1,6\n");
  EXPECT_EQ(f.rows(), 3u);
  EXPECT_EQ(f.vars(), 2u);
  EXPECT_EQ(f.names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(f.at(1, 0), 3.5);
  EXPECT_EQ(f.at(2, 0), 0.5);
  EXPECT_EQ(f.at(1, 1), -4.0);
}

TEST(Csv, HandlesCrlfAndBlankLines) {
  const auto f = parse("t,x\r\n1,1\r\n\r\n2,2\r\n");
  EXPECT_EQ(f.rows(), 2u);
}

TEST(Csv, NonNumericCellNamesRowAndColumn) {
  try {
    parse("date,a,b\n1,1,2\n2,3,oops\n");
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'b'"), std::string::npos) << msg;
  }
}

TEST(Csv, MissingCellIsRejected) {
  EXPECT_THROW(parse("date,a,b\n1,1,\n"), DataError);
  EXPECT_THROW(parse("date,a,b\n1,1\n"), DataError);
}

TEST(Csv, DuplicateOrDecreasingTimestampIsOrderError) {
  EXPECT_THROW(parse("date,a\n2020-01-01,1\n2020-01-01,2\n"), DataError);
  EXPECT_THROW(parse("date,a\n3,1\n2,2\n"), DataError);
  // Numeric timestamps compare as numbers, not strings.
  EXPECT_NO_THROW(parse("date,a\n9,1\n10,2\n"));
}

TEST(Csv, MissingFileIsDataError) { EXPECT_THROW(load_csv("/nonexistent/file.csv"), DataError); }

TEST(Csv, LoadsFromDisk) {
  const auto path = std::filesystem::temp_directory_path() / "dmsc_test_toy.csv";
  {
    std::ofstream out(path);
    out << "date,x,y\n0,1,2\n1,3,4\n";
  }
  const auto f = load_csv(path);
  EXPECT_EQ(f.rows(), 2u);
  std::filesystem::remove(path);
}

TEST(Splits, NamedTableMatchesBenchmarkSizes) {
  // (train, val, test) look-back counts at t = 96.
  auto counts = [](std::string_view name, std::size_t rows) { return lookback_counts(*named_split(name, rows), 96); };
  EXPECT_EQ(counts("ETTh1", 17420), (std::array<std::size_t, 3>{8545, 2881, 2881}));
  EXPECT_EQ(counts("ETTh2", 17420), (std::array<std::size_t, 3>{8545, 2881, 2881}));
  EXPECT_EQ(counts("ETTm1", 69680), (std::array<std::size_t, 3>{34465, 11521, 11521}));
  EXPECT_EQ(counts("Electricity", 26304), (std::array<std::size_t, 3>{18317, 2633, 5261}));
  EXPECT_EQ(counts("Traffic", 17544), (std::array<std::size_t, 3>{12185, 1757, 3509}));
  EXPECT_EQ(counts("Weather", 52696), (std::array<std::size_t, 3>{36792, 5271, 10540}));
  EXPECT_EQ(named_split("ETTh1", 0)->total(), 14400u);
  EXPECT_FALSE(named_split("unknown", 100).has_value());
}

TEST(Splits, UnknownNameWithoutFractionsIsConfigError) {
  EXPECT_THROW(WindowedDataset::from_name(ramp(100, 1), "mystery", 4, 2), ConfigError);
}

TEST(Windows, CountsFollowFormula) {
  const WindowedDataset ds(ramp(20, 2), {14, 3, 3}, 4, 2);
  EXPECT_EQ(ds.window_count(Split::train), 9u);
  EXPECT_EQ(ds.window_count(Split::val), 2u);
  EXPECT_EQ(ds.window_count(Split::test), 2u);
}

TEST(Windows, StayInsideTheirSplit) {
  const WindowedDataset ds(ramp(200, 2), {140, 30, 30}, 24, 6);
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto [first, len] = ds.target_range(s);
    for (std::size_t i = 0; i < ds.window_count(s); ++i) {
      const std::size_t start = ds.window_start(s, i);
      const std::size_t target_begin = start + 24, target_end = target_begin + 6;
      if (s == Split::train) {
        EXPECT_GE(start, 0u);
      } else {
        EXPECT_GE(target_begin, first);  // look-back may reach back, targets may not
      }
      EXPECT_LE(target_end, first + len);
    }
  }
  EXPECT_THROW(ds.window_start(Split::val, ds.window_count(Split::val)), std::out_of_range);
}

TEST(Windows, BatchLayoutIsVariableMajor) {
  const SeriesFrame f = ramp(40, 2);
  const WindowedDataset ds(f, {30, 5, 5}, 4, 2);
  const Batch b = ds.batch(Split::val, {1});
  const std::size_t start = ds.window_start(Split::val, 1);
  EXPECT_EQ(b.x.shape(), (Shape{1, 2, 4}));
  for (std::size_t v = 0; v < 2; ++v) {
    for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(b.x[v * 4 + t], ds.stats().normalize(f.at(start + t, v), v));
    for (std::size_t t = 0; t < 2; ++t) EXPECT_EQ(b.y[v * 2 + t], ds.stats().normalize(f.at(start + 4 + t, v), v));
  }
}

TEST(Windows, RejectsImpossibleSplits) {
  EXPECT_THROW(WindowedDataset(ramp(20, 1), {5, 3, 3}, 4, 2), ConfigError);
  EXPECT_THROW(WindowedDataset(ramp(20, 1), {14, 1, 3}, 4, 2), ConfigError);
  EXPECT_THROW(WindowedDataset(ramp(20, 1), {14, 4, 4}, 4, 2), ConfigError);
}

TEST(Normalization, TrainRowsAreStandardized) {
  const WindowedDataset ds(ramp(300, 3), {200, 50, 50}, 10, 5);
  for (std::size_t v = 0; v < 3; ++v) {
    double m = 0.0, s = 0.0;
    for (std::size_t t = 0; t < 200; ++t) m += ds.value(t, v);
    m /= 200.0;
    for (std::size_t t = 0; t < 200; ++t) s += (ds.value(t, v) - m) * (ds.value(t, v) - m);
    EXPECT_LT(std::abs(m), 1e-10);
    EXPECT_NEAR(std::sqrt(s / 200.0), 1.0, 1e-9);
  }
}

TEST(Normalization, StatisticsIgnoreNonTrainRows) {
  SeriesFrame a = ramp(300, 2);
  SeriesFrame b = a;
  for (std::size_t i = 200 * 2; i < b.values.size(); ++i) b.values[i] *= 1000.0;
  const WindowedDataset da(a, {200, 50, 50}, 10, 5), db(b, {200, 50, 50}, 10, 5);
  EXPECT_EQ(da.stats().mean, db.stats().mean);
  EXPECT_EQ(da.stats().std, db.stats().std);
  // Recompute from train rows directly.
  double m = 0.0;
  for (std::size_t t = 0; t < 200; ++t) m += a.at(t, 1);
  EXPECT_NEAR(da.stats().mean[1], m / 200.0, 1e-12);
}

TEST(Normalization, InverseAndStdFloor) {
  SeriesFrame f = ramp(50, 1);
  for (auto& v : f.values) v = 3.0;
  const Standardizer s = Standardizer::fit(f, 30);
  EXPECT_EQ(s.std[0], Standardizer::kFloor);
  const Standardizer r = Standardizer::fit(ramp(50, 2), 30);
  for (double x : {-5.0, 0.0, 1.25, 1e3}) EXPECT_NEAR(r.denormalize(r.normalize(x, 1), 1), x, 1e-12);
}

TEST(Synthetic, NoiseFreeSineIsPeriodic) {
  SynthSpec s;
  s.n_vars = 2;
  s.length = 200;
  s.components = {{1.3, 25.0, 0.4}};
  s.slope = 0.0;
  s.noise = 0.0;
  const auto f = synth_series(s);
  for (std::size_t t = 0; t + 25 < 200; ++t)
    for (std::size_t v = 0; v < 2; ++v) EXPECT_NEAR(f.at(t, v), f.at(t + 25, v), 1e-9);
  EXPECT_GT(std::abs(f.at(3, 0) - f.at(3 + 12, 0)), 0.1);
}

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
  SynthSpec s;
  const auto a = synth_series(s), b = synth_series(s);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(frame_hash(a), frame_hash(b));
  s.seed = 2;
  EXPECT_NE(frame_hash(synth_series(s)), frame_hash(a));
}

TEST(Synthetic, NoiseLevelMatchesSpec) {
  SynthSpec s;
  s.n_vars = 1;
  s.length = 10000;
  s.noise = 0.1;
  const auto f = synth_series(s);
  double m = 0.0, q = 0.0;
  for (std::size_t t = 0; t < s.length; ++t) m += f.at(t, 0) - synth_signal(s, 0, t);
  m /= static_cast<double>(s.length);
  for (std::size_t t = 0; t < s.length; ++t) {
    const double r = f.at(t, 0) - synth_signal(s, 0, t) - m;
    q += r * r;
  }
  const double sd = std::sqrt(q / static_cast<double>(s.length - 1));
  EXPECT_NEAR(sd, 0.1, 0.01);
}

TEST(Synthetic, RejectsEmpty) {
  SynthSpec s;
  s.length = 0;
  EXPECT_THROW(synth_series(s), ConfigError);
}
