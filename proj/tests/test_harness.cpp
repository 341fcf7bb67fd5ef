#include "l2d/config.hpp"
#include "l2d/harness.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace l2d;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string &name) {
  const fs::path dir = fs::temp_directory_path() / "l2d_harness_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig small_synthetic(int T = 400) {
  RunConfig cfg = config::parse_run_config(Json::parse(R"({
    "environment": {"kind": "synthetic", "T": 400},
    "model": {"feature_map": "intercept_pad", "Q_g": 0.1, "initial_loading": 1.0, "initial_noise": 4.0},
    "warmup": 20
  })"),
                                           L2D_SOURCE_DIR);
  cfg.synthetic.T = T;
  return cfg;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(config::parse_run_config(Json::parse(R"({"environment": {"kind": "synthetic"}, "bogus": 1})"), "."),
               ConfigError);
  EXPECT_THROW(config::parse_run_config(Json::parse(R"({"environment": {"kind": "synthetic", "TT": 5}})"), "."),
               ConfigError);
  EXPECT_THROW(config::parse_run_config(Json::parse(R"({"environment": {"kind": "mars"}})"), "."), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  for (const char *name : {"synthetic.json", "melbourne.json", "fred.json"}) {
    const std::string p = std::string(L2D_SOURCE_DIR) + "/configs/" + name;
    EXPECT_NO_THROW(config::load_run_config(p)) << name;
  }
}

TEST(Aggregate, MeanAndStandardError) {
  const auto a = harness::aggregate("p", {1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(a.mean, 2.0);
  EXPECT_NEAR(a.se, 1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_FALSE(a.single_run);
  const auto s = harness::aggregate("p", {4.0});
  EXPECT_EQ(s.se, 0.0);
  EXPECT_TRUE(s.single_run);
  EXPECT_THROW(harness::aggregate("p", {}), ConfigError);
}

TEST(Harness, RealizedCostDefinition) {
  EXPECT_DOUBLE_EQ(harness::realized_cost(Vec::Constant(1, 3.0), Vec::Constant(1, 1.0), 0.5), 4.5);
}

TEST(Harness, ConstantCostsGiveThatMean) {
  std::vector<RoundRecord> log(10);
  for (auto &r : log) r.cost = 2.5;
  log[3].scored = false;
  log[3].cost = 100.0;
  const auto s = harness::summarize("fixed:0", 1, log, 4);
  EXPECT_DOUBLE_EQ(s.mean_cost, 2.5);
  EXPECT_EQ(s.scored, 9);
}

TEST(Harness, OracleLowerBoundsEveryPolicyPerRound) {
  const RunConfig cfg = small_synthetic();
  const auto oracle = harness::run_episode(cfg, "oracle", 2);
  for (const char *p : {"random", "linucb", "l2d-slds"}) {
    const auto run = harness::run_episode(cfg, p, 2);
    for (size_t t = 0; t < run.log.size(); ++t) EXPECT_LE(oracle.log[t].cost, run.log[t].cost + 1e-12) << p;
    EXPECT_LE(oracle.summary.mean_cost, run.summary.mean_cost);
  }
}

TEST(Harness, ChosenExpertAlwaysAvailable) {
  const RunConfig cfg = small_synthetic(2600);
  for (const char *p : {"l2d-slds", "neuralucb", "fixed:1"}) {
    const auto run = harness::run_episode(cfg, p, 1);
    for (const auto &r : run.log) EXPECT_EQ(r.available[static_cast<size_t>(r.chosen)], 1) << p << " t=" << r.t;
  }
}

TEST(Harness, FixedFallbackRoundsAreUnscored) {
  const RunConfig cfg = small_synthetic(2600);
  const auto run = harness::run_episode(cfg, "fixed:1", 1);
  EXPECT_EQ(run.summary.fallbacks, 501);
  EXPECT_EQ(run.summary.scored, 2600 - 501);
}

TEST(Harness, WarmupIsRoundRobin) {
  const RunConfig cfg = small_synthetic();
  const auto run = harness::run_episode(cfg, "l2d-slds", 1);
  for (int t = 0; t < cfg.warmup; ++t) {
    EXPECT_TRUE(run.log[t].warmup);
    EXPECT_EQ(run.log[t].chosen, t % 4);
  }
  EXPECT_FALSE(run.log[cfg.warmup].warmup);
}

TEST(Harness, DeterministicLogs) {
  const RunConfig cfg = small_synthetic();
  for (const char *p : {"l2d-slds", "neuralucb", "random"}) {
    const auto a = harness::run_episode(cfg, p, 7), b = harness::run_episode(cfg, p, 7);
    const auto shape = harness::log_shape(cfg, 4);
    EXPECT_EQ(harness::round_log_string(shape, p, 7, a.log), harness::round_log_string(shape, p, 7, b.log)) << p;
  }
}

TEST(Harness, DisabledEmMatchesNoLearning) {
  RunConfig a = small_synthetic();
  RunConfig b = a;
  b.em.online = false;
  b.em.warmup_fit = false;
  b.em.em.n_em = 0;
  b.em.em.n_em_window = 0;
  const auto ra = harness::run_episode(a, "l2d-slds", 3), rb = harness::run_episode(b, "l2d-slds", 3);
  const auto shape = harness::log_shape(a, 4);
  EXPECT_EQ(harness::round_log_string(shape, "l2d-slds", 3, ra.log),
            harness::round_log_string(shape, "l2d-slds", 3, rb.log));
  EXPECT_TRUE(ra.em_log.empty());
}

TEST(Harness, NoGlobalFactorAblationHasZeroFactorIg) {
  const RunConfig cfg = small_synthetic();
  const auto run = harness::run_episode(cfg, "l2d-slds-no-g", 1);
  for (const auto &r : run.log) {
    for (const auto &[k, v] : r.diag.ig_factor) EXPECT_EQ(v, 0.0);
  }
}

TEST(Harness, SweepWritesConsistentArtifacts) {
  RunConfig cfg = small_synthetic(300);
  cfg.policies = {"l2d-slds", "random", "oracle"};
  cfg.seeds = {1, 2};
  cfg.workers = 2;
  const fs::path dir = scratch_dir("sweep");
  const auto res = harness::run_sweep(cfg, dir.string());
  ASSERT_EQ(res.runs.size(), 6u);
  for (const auto &r : res.runs) {
    const auto table = harness::read_csv_file(harness::round_log_path(dir.string(), r.policy, r.seed));
    const double j = harness::mean_cost_from_log(table);
    EXPECT_NEAR(j, r.mean_cost, 1e-12 * std::max(1.0, std::abs(j)));
    EXPECT_EQ(static_cast<int>(table.rows.size()), r.rounds);
  }
  const auto summary = harness::read_csv_file((dir / "summary.csv").string());
  EXPECT_EQ(summary.rows.size(), 6u);
  const auto agg = harness::aggregate_from_summary(summary);
  ASSERT_EQ(agg.size(), 3u);
  for (const auto &a : agg) EXPECT_EQ(a.n, 2);
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "aggregate.csv"));

  // Same sweep serially yields identical bytes.
  cfg.workers = 1;
  const fs::path dir2 = scratch_dir("sweep_serial");
  harness::run_sweep(cfg, dir2.string());
  for (const auto &r : res.runs) {
    const auto name = fs::path(harness::round_log_path(dir.string(), r.policy, r.seed)).filename();
    EXPECT_EQ(slurp(dir / name), slurp(dir2 / name));
  }
}

TEST(Correlation, IdenticalSeriesAndIndependentSeries) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<std::vector<double>> s(3);
  for (int i = 0; i < 5000; ++i) {
    const double v = n01(rng);
    s[0].push_back(v);
    s[1].push_back(v);
    s[2].push_back(n01(rng));
  }
  const Mat c = harness::pearson_matrix(s);
  EXPECT_NEAR(c(0, 1), 1.0, 1e-12);
  EXPECT_LT(std::abs(c(0, 2)), 0.1);
  EXPECT_NEAR(c(2, 2), 1.0, 1e-12);
}

TEST(Correlation, MissingAndDegenerateEntries) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const Mat c = harness::pearson_matrix({{1, 2, 3, nan}, {2, 4, 7, 1}, {5, 5, 5, 5}, {nan, nan, 1, 2}});
  EXPECT_NEAR(c(0, 1), harness::pearson_matrix({{1, 2, 3}, {2, 4, 7}})(0, 1), 1e-14);
  EXPECT_TRUE(std::isnan(c(0, 2)));
  EXPECT_TRUE(std::isnan(c(0, 3))); // one joint observation
}

TEST(Correlation, FullFeedbackFromLogShowsBlocks) {
  RunConfig cfg = small_synthetic(3000);
  const auto run = harness::run_episode(cfg, "random", 1);
  std::istringstream in(harness::round_log_string(harness::log_shape(cfg, 4), "random", 1, run.log));
  const Mat c = harness::correlation_matrix(harness::read_csv(in), harness::CorrelationMode::full, 1);
  const auto b = harness::block_contrast(c);
  EXPECT_GE(b.within - b.cross, 0.2);
}

TEST(Csv, SplitAndParse) {
  EXPECT_EQ(harness::split_csv_line("a,\"b,c\",d"), (std::vector<std::string>{"a", "b,c", "d"}));
  EXPECT_TRUE(std::isnan(harness::parse_cell("NA")));
  EXPECT_EQ(harness::parse_cell("1.5"), 1.5);
  EXPECT_EQ(harness::fmt(0.1), "0.10000000000000001");
  EXPECT_EQ(harness::file_tag("fixed:2"), "fixed-2");
}

#ifdef L2D_CLI
TEST(Cli, RunAndExportSummary) {
  const fs::path dir = scratch_dir("cli");
  {
    std::ofstream f(dir / "cfg.json");
    f << R"({"environment": {"kind": "synthetic", "T": 200}, "policies": ["random", "fixed:0"], "warmup": 10,
             "seeds": [1, 2]})";
  }
  const std::string cli = L2D_CLI;
  const std::string run = cli + " run --config " + (dir / "cfg.json").string() + " --out " + (dir / "out").string() +
                          " > " + (dir / "stdout.txt").string() + " 2>&1";
  ASSERT_EQ(std::system(run.c_str()), 0) << slurp(dir / "stdout.txt");
  EXPECT_TRUE(fs::exists(dir / "out" / "rounds_random_seed1.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "rounds_fixed-0_seed2.csv"));
  const std::string exp = cli + " export-summary --summary " + (dir / "out" / "summary.csv").string() + " --out " +
                          (dir / "agg.csv").string() + " > /dev/null";
  ASSERT_EQ(std::system(exp.c_str()), 0);
  EXPECT_EQ(harness::read_csv_file((dir / "agg.csv").string()).rows.size(), 2u);
  const std::string corr = cli + " correlate --log " + (dir / "out" / "rounds_random_seed1.csv").string() +
                           " --mode full --out " + (dir / "corr.csv").string();
  ASSERT_EQ(std::system(corr.c_str()), 0);
  EXPECT_EQ(harness::read_csv_file((dir / "corr.csv").string()).rows.size(), 4u);
  const std::string bad = cli + " run --config " + (dir / "missing.json").string() + " > /dev/null 2>&1";
  EXPECT_NE(std::system(bad.c_str()), 0);
}
#endif
