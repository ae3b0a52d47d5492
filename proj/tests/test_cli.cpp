#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = DMSC_CLI_PATH;
const std::string kToy = std::string(DMSC_SOURCE_DIR) + "/configs/toy.cfg";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dmsc_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = kCli + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, TrainWritesCheckpointMetricsAndManifest) {
  const fs::path dir = scratch("train");
  ASSERT_EQ(run("train --config " + kToy + " --out " + dir.string(), dir / "log"), 0) << slurp(dir / "log");
  for (const char* f : {"model.ckpt", "metrics.csv", "manifest.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_FALSE(fs::exists(dir / "routing.csv"));
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 1);
  EXPECT_EQ(manifest["variant"], "full");
  EXPECT_TRUE(manifest["dataset"].contains("hash_fnv1a64"));
  EXPECT_TRUE(manifest.contains("build_id"));
  EXPECT_EQ(manifest["timings"]["epochs"].size(), 2u);
  EXPECT_EQ(slurp(dir / "metrics.csv").substr(0, 33), "epoch,train_mse,val_mse,val_mae,l");
}

TEST(Cli, RerunWithSameSeedGivesIdenticalMetrics) {
  const fs::path a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  ASSERT_EQ(run("train --config " + kToy + " --out " + a.string(), a / "log"), 0);
  ASSERT_EQ(run("train --config " + kToy + " --out " + b.string(), b / "log"), 0);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  ASSERT_EQ(run("train --config " + kToy + " --seed 2 --out " + c.string(), c / "log"), 0);
  EXPECT_NE(slurp(a / "metrics.csv"), slurp(c / "metrics.csv"));
}

TEST(Cli, EvalReproducesTrainTimeValidationMetric) {
  const fs::path dir = scratch("eval");
  ASSERT_EQ(run("train --config " + kToy + " --out " + dir.string(), dir / "log"), 0);
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  const double best = manifest["result"]["best_val_mse"];
  ASSERT_EQ(run("eval --checkpoint " + (dir / "model.ckpt").string() + " --horizon 24 --out " + dir.string(), dir / "elog"), 0)
      << slurp(dir / "elog");
  std::istringstream csv(slurp(dir / "eval.csv"));
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "checkpoint,split,horizon,mse,mae,count");
  std::vector<std::string> fields;
  std::stringstream rs(row);
  for (std::string f; std::getline(rs, f, ',');) fields.push_back(f);
  ASSERT_EQ(fields.size(), 6u);
  EXPECT_NEAR(std::stod(fields[3]), best, 1e-10);
}

TEST(Cli, EvalRejectsMismatchedHorizonAndBadMagic) {
  const fs::path dir = scratch("badck");
  ASSERT_EQ(run("train --config " + kToy + " --out " + dir.string(), dir / "log"), 0);
  EXPECT_EQ(run("eval --checkpoint " + (dir / "model.ckpt").string() + " --horizon 96", dir / "elog"), 2);
  EXPECT_NE(slurp(dir / "elog").find("horizon"), std::string::npos);
  std::ofstream(dir / "bad.ckpt") << "NOTACKPTxxxxxxxxxxxx";
  EXPECT_EQ(run("eval --checkpoint " + (dir / "bad.ckpt").string(), dir / "blog"), 2);
  EXPECT_NE(slurp(dir / "blog").find("bad magic"), std::string::npos);
}

TEST(Cli, EvalRejectsVariableCountMismatch) {
  const fs::path dir = scratch("cmis");
  ASSERT_EQ(run("train --config " + kToy + " --out " + dir.string(), dir / "log"), 0);
  EXPECT_EQ(run("eval --checkpoint " + (dir / "model.ckpt").string() + " --config " + kToy +
                    " --set synthetic.n_vars=3",
                dir / "elog"),
            2);
  EXPECT_NE(slurp(dir / "elog").find("variables"), std::string::npos);
}

TEST(Cli, MissingDatasetAndBadConfigExitTwo) {
  const fs::path dir = scratch("bad");
  EXPECT_EQ(run("train --config " + kToy + " --set data.source=/no/such/file.csv --out " + dir.string(), dir / "log"), 2);
  EXPECT_NE(slurp(dir / "log").find("data.source"), std::string::npos);
  EXPECT_EQ(run("train --config " + kToy + " --set model.d_model=-3 --out " + dir.string(), dir / "log2"), 2);
  EXPECT_NE(slurp(dir / "log2").find("model.d_model"), std::string::npos);
  EXPECT_EQ(run("no-such-verb", dir / "log3"), 2);
}

TEST(Cli, ForecastWritesDenormalizedRows) {
  const fs::path dir = scratch("forecast");
  ASSERT_EQ(run("train --config " + kToy + " --out " + dir.string(), dir / "log"), 0);
  ASSERT_EQ(run("forecast --checkpoint " + (dir / "model.ckpt").string() + " --out " + dir.string(), dir / "flog"), 0);
  std::istringstream csv(slurp(dir / "forecast.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  EXPECT_EQ(line, "window,step,row,variable,forecast,actual");
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2u * 24u);
}

TEST(Cli, GradcheckPassesAndCatchesInjectedFault) {
  const fs::path dir = scratch("grad");
  EXPECT_EQ(run("gradcheck --out " + dir.string(), dir / "log"), 0) << slurp(dir / "log");
  const std::string report = slurp(dir / "log");
  for (const char* m : {"ops", "empd", "tib", "cascade", "asr_moe", "model"})
    EXPECT_NE(report.find(std::string("  ") + m + ' '), std::string::npos) << m;
  EXPECT_EQ(run("gradcheck --inject-fault --out " + dir.string(), dir / "flog"), 1);
  EXPECT_NE(slurp(dir / "flog").find("FAIL ops/faulty_square"), std::string::npos);
}

TEST(Cli, AblateEchoesVariantAndRejectsUnknownNames) {
  const fs::path dir = scratch("ablate");
  EXPECT_EQ(run("ablate --config " + kToy + " --variant bogus --out " + dir.string(), dir / "log"), 2);
  const std::string msg = slurp(dir / "log");
  for (const char* v : {"static_decomp", "intra_only", "agg_heads", "no_asrmoe"}) EXPECT_NE(msg.find(v), std::string::npos);
  ASSERT_EQ(run("ablate --config " + kToy + " --variant agg_heads --dump-routing --out " + dir.string(), dir / "log2"), 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "manifest.json"))["variant"], "agg_heads");
  EXPECT_FALSE(fs::exists(dir / "routing.csv"));
}

TEST(Cli, DumpRoutingWritesBatchMeanWeights) {
  const fs::path dir = scratch("routing");
  ASSERT_EQ(run("train --config " + kToy + " --dump-routing --out " + dir.string(), dir / "log"), 0);
  std::istringstream csv(slurp(dir / "routing.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,step,scale,expert,kind,omega_mean,selected_frac");
  // Router weights of each (step, scale) group sum to one; local selections sum to K.
  std::map<std::pair<int, int>, std::pair<double, double>> groups;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 7u);
    auto& g = groups[{std::stoi(f[1]), std::stoi(f[2])}];
    g.first += std::stod(f[5]);
    if (f[4] == "local") g.second += std::stod(f[6]);
  }
  ASSERT_FALSE(groups.empty());
  for (const auto& [key, g] : groups) {
    EXPECT_NEAR(g.first, 1.0, 1e-9);
    EXPECT_NEAR(g.second, 2.0, 1e-12);
  }
}

TEST(Cli, BenchWritesOneRowPerLengthPlusSummary) {
  const fs::path dir = scratch("bench");
  ASSERT_EQ(run("bench --ls 16,24,32,48 --vars 2 --d-model 8 --layers 2 --out " + dir.string(), dir / "log"), 0)
      << slurp(dir / "log");
  std::istringstream csv(slurp(dir / "bench.csv"));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "kind,size,mean_s,reps,slope");
  EXPECT_EQ(rows[5].substr(0, 10), "summary_L,");
  EXPECT_EQ(run("bench --ls 16,24,32 --vars 2 --d-model 8 --out " + dir.string(), dir / "log2"), 2);
}
