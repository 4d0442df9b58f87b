#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using pointnorm::cli::run;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> small_train(const std::string& out) {
  return {"train",         "--synth",         "default", "--model", "tiny", "--points",      "64",
          "--synth-train", "48",              "--synth-test", "16", "--epochs",   "2",          "--out",
          out,             "--deterministic"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / "pointnorm_tests" / "cli" / info->name();
    fs::remove_all(root_);
    fs::create_directories(root_);
    setenv("POINTNORM_OUTPUT_ROOT", root_.c_str(), 1);
  }
  void TearDown() override { unsetenv("POINTNORM_OUTPUT_ROOT"); }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, TrainWritesOneCsvRowPerEpochAndArtifacts) {
  auto args = small_train("run");
  args[12] = "5";
  const auto r = invoke(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dir = root_ / "run";
  std::ifstream csv(dir / "metrics.csv");
  std::string header, line;
  std::getline(csv, header);
  EXPECT_EQ(header, "schema_version,epoch,loss,train_oa,oa,macc,lr,seconds");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 5);
  for (const char* f : {"final.pnck", "best.pnck", "last.pnck", "summary.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto s = read_json(dir / "summary.json");
  EXPECT_EQ(s["schema_version"], 1);
  EXPECT_EQ(s["epochs_run"], 5);
  EXPECT_GT(s["params"].get<double>(), 0);
  EXPECT_GT(s["flops"].get<double>(), 0);
  EXPECT_GT(s["timing"]["train_samples_per_sec"].get<double>(), 0);
}

TEST_F(Cli, EvalReproducesSummaryAndPerClassAveragesToMacc) {
  ASSERT_EQ(invoke(small_train("run")).code, 0);
  const auto s = read_json(root_ / "run" / "summary.json");
  const auto r = invoke({"eval", "--checkpoint", (root_ / "run" / "final.pnck").string(), "--synth", "default",
                         "--synth-train", "48", "--synth-test", "16", "--out", "eval.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto e = read_json(root_ / "eval.json");
  EXPECT_EQ(e["oa"].get<double>(), s["final"]["oa"].get<double>());
  EXPECT_EQ(e["macc"].get<double>(), s["final"]["macc"].get<double>());
  double sum = 0;
  int present = 0;
  for (const auto& [name, acc] : e["per_class"].items()) {
    if (acc.is_null()) continue;
    sum += acc.get<double>();
    ++present;
  }
  EXPECT_NEAR(sum / present, e["macc"].get<double>(), 1e-12);
}

TEST_F(Cli, DeterministicRunsGiveIdenticalSummaries) {
  ASSERT_EQ(invoke(small_train("a")).code, 0);
  ASSERT_EQ(invoke(small_train("b")).code, 0);
  auto a = read_json(root_ / "a" / "summary.json");
  auto b = read_json(root_ / "b" / "summary.json");
  a.erase("timing");
  b.erase("timing");
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(root_ / "a" / "final.pnck"), slurp(root_ / "b" / "final.pnck"));
}

TEST_F(Cli, CorruptedCheckpointIsCleanDataError) {
  std::ofstream(root_ / "junk.pnck") << "NOPE and more bytes";
  const auto r = invoke({"eval", "--checkpoint", (root_ / "junk.pnck").string(), "--synth", "default"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad magic"), std::string::npos) << r.err;
}

TEST_F(Cli, EvalRefusesMismatchedModelConfig) {
  ASSERT_EQ(invoke(small_train("run")).code, 0);
  auto cfg = read_json(root_ / "run" / "summary.json")["model"];
  cfg["stats_mode"] = "GMGS";
  std::ofstream(root_ / "other.json") << cfg.dump();
  const auto r = invoke({"eval", "--checkpoint", (root_ / "run" / "final.pnck").string(), "--model-config",
                         (root_ / "other.json").string(), "--synth", "default"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("digest"), std::string::npos) << r.err;
}

TEST_F(Cli, ConfigConflictsExitWithOne) {
  auto both = small_train("x");
  both.push_back("--disable-pn");
  both.push_back("--disable-rpn");
  EXPECT_EQ(invoke(both).code, 1);
  auto mode = small_train("x");
  mode.insert(mode.end(), {"--stats-mode", "XXYY"});
  EXPECT_EQ(invoke(mode).code, 1);
  auto sources = small_train("x");
  sources.insert(sources.end(), {"--manifest", "m.json"});
  EXPECT_EQ(invoke(sources).code, 1);
  EXPECT_EQ(invoke({"train", "--epochs", "zero"}).code, 1);
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST_F(Cli, MissingManifestIsDataError) {
  const auto r = invoke({"train", "--manifest", (root_ / "nope.json").string(), "--epochs", "1"});
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST_F(Cli, SynthThenTrainFromManifest) {
  ASSERT_EQ(invoke({"synth", "--out", "data", "--points", "64", "--train", "24", "--test", "8", "--format",
                    "xyz-text"})
                .code,
            0);
  const auto manifest = root_ / "data" / "manifest.json";
  ASSERT_TRUE(fs::exists(manifest));
  EXPECT_EQ(read_json(manifest)["entries"].size(), 32u);
  const auto r = invoke({"train", "--manifest", manifest.string(), "--points", "64", "--model", "tiny", "--epochs",
                         "1", "--out", "from_manifest"});
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST_F(Cli, TomlConfigSuppliesOptions) {
  std::ofstream(root_ / "run.toml") << "[train]\nsynth = \"default\"\nmodel = \"tiny\"\npoints = 64\n"
                                       "synth-train = 24\nsynth-test = 8\nepochs = 3\nout = \"from_toml\"\n";
  const auto r = invoke({"--config", (root_ / "run.toml").string(), "train"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_json(root_ / "from_toml" / "summary.json")["epochs_run"], 3);
}

TEST_F(Cli, OutputRootOverridesRelativePaths) {
  EXPECT_EQ(pointnorm::cli::resolve_output("a/b"), root_ / "a" / "b");
  EXPECT_EQ(pointnorm::cli::resolve_output("/abs/x"), fs::path("/abs/x"));
}

TEST_F(Cli, DeltaLogHasOneLinePerStagePerEpoch) {
  auto args = small_train("run");
  args.push_back("--delta-log");
  ASSERT_EQ(invoke(args).code, 0);
  std::ifstream in(root_ / "run" / "delta.jsonl");
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    const auto j = json::parse(line);
    EXPECT_TRUE(j.contains("sigma1"));
    if (j["has_pn"].get<bool>()) EXPECT_TRUE(j.contains("regime"));
  }
  EXPECT_EQ(lines, 2 * 4);
}

TEST_F(Cli, AblateStatsModesEmitsFourRowsWithSharedCost) {
  const auto r = invoke({"ablate", "--grid", "stats_mode=LMGS,LMLS,GMLS,GMGS", "--seeds", "1", "--synth", "default",
                         "--model", "tiny", "--points", "64", "--synth-train", "24", "--synth-test", "8", "--epochs",
                         "1", "--out", "abl"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream csv(root_ / "abl" / "ablation.csv");
  std::string line;
  std::getline(csv, line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& row : rows) {
    EXPECT_EQ(row[5], rows[0][5]);
    EXPECT_EQ(row[6], rows[0][6]);
  }
}

TEST_F(Cli, AblateRejectsUnknownAxis) {
  const auto r = invoke({"ablate", "--grid", "depth=1,2"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stats_mode"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("disable_rpn"), std::string::npos) << r.err;
}

TEST_F(Cli, GradcheckOpScopeCoversRegisteredOps) {
  const auto r = invoke({"gradcheck", "--scope", "op", "--seeds", "1", "--out", "gc.json"});
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = read_json(root_ / "gc.json");
  EXPECT_EQ(j["cases"].size(), 28u);
  EXPECT_EQ(j["failed"], 0);
  EXPECT_TRUE(j.contains("note"));
}

TEST_F(Cli, BenchReportsThroughputAndCost) {
  const auto r = invoke({"bench", "--models", "tiny", "--points", "64", "--batch", "4", "--repeats", "1", "--out",
                         "bench.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(root_ / "bench.json");
  ASSERT_EQ(j["results"].size(), 1u);
  const auto& t = j["results"][0];
  EXPECT_EQ(t["test_runs"].size(), 1u);
  EXPECT_EQ(t["test_samples_per_sec"], t["test_runs"][0]);
  EXPECT_GT(t["train_samples_per_sec"].get<double>(), 0);
}
