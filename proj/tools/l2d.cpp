#include "l2d/config.hpp"
#include "l2d/harness.hpp"
#include "l2d/serialize.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace l2d;

namespace {

std::vector<std::string> table_policies(int num_experts) {
  std::vector<std::string> p{"l2d-slds", "l2d-slds-no-g", "linucb", "neuralucb", "random"};
  for (int k = 0; k < num_experts; ++k) p.push_back("fixed:" + std::to_string(k));
  p.push_back("oracle");
  return p;
}

std::vector<std::uint64_t> parse_seeds(const std::string &s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    const auto dash = tok.find('-');
    if (dash != std::string::npos && dash > 0) {
      const auto a = std::stoull(tok.substr(0, dash)), b = std::stoull(tok.substr(dash + 1));
      for (auto v = a; v <= b; ++v) out.push_back(v);
    } else {
      out.push_back(std::stoull(tok));
    }
  }
  if (out.empty()) throw ConfigError("--seeds: no seeds given");
  return out;
}

std::string default_out(const RunConfig &cfg, const std::string &flag) {
  if (!flag.empty()) return flag;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char *env = std::getenv("L2D_OUTPUT_DIR")) return env;
  return "out";
}

struct RunArgs {
  std::string config, seeds, out;
  std::vector<std::string> policies;
  int workers = 0;
};

void add_run_options(CLI::App *cmd, RunArgs &a) {
  cmd->add_option("--config", a.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seeds", a.seeds, "comma-separated seeds or ranges, e.g. 1,2,3 or 1-5");
  cmd->add_option("--out", a.out, "output directory (default: config output_dir, then $L2D_OUTPUT_DIR)");
  cmd->add_option("--policy", a.policies, "policy names (repeatable); overrides the config list");
  cmd->add_option("--workers", a.workers, "concurrent runs");
}

int do_run(const RunArgs &a, bool table) {
  RunConfig cfg = config::load_run_config(a.config);
  if (!a.seeds.empty()) cfg.seeds = parse_seeds(a.seeds);
  if (!a.policies.empty()) cfg.policies = a.policies;
  else if (table) cfg.policies = table_policies(harness::build_environment(cfg, cfg.seeds.front()).num_experts);
  if (a.workers > 0) cfg.workers = a.workers;
  const std::string dir = default_out(cfg, a.out);
  const auto res = harness::run_sweep(cfg, dir, &std::cerr);
  for (const auto &r : res.runs) {
    std::ifstream in(harness::round_log_path(dir, r.policy, r.seed));
    const double j = harness::mean_cost_from_log(harness::read_csv(in));
    if (std::abs(j - r.mean_cost) > 1e-12 * std::max(1.0, std::abs(j))) {
      throw std::runtime_error("metric mismatch between summary and round log for " + r.policy);
    }
  }
  harness::write_aggregate_text(std::cout, res.aggregate);
  if (table) {
    std::ofstream f(dir + "/table.txt");
    harness::write_aggregate_text(f, res.aggregate);
  }
  std::cerr << "wrote " << dir << "/summary.csv\n";
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"l2d: expert routing under partial feedback"};
  app.require_subcommand(1);

  RunArgs run_args, sweep_args;
  auto *run = app.add_subcommand("run", "run policies over seeds and write logs and summaries");
  add_run_options(run, run_args);
  auto *sweep = app.add_subcommand("sweep", "run the full policy table (defaults to all baselines)");
  add_run_options(sweep, sweep_args);

  std::string em_config, em_out;
  std::uint64_t em_seed = 1;
  int em_first = 0, em_count = 500;
  auto *emfit = app.add_subcommand("em-fit", "offline MC-EM on a round-robin window");
  emfit->add_option("--config", em_config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  emfit->add_option("--seed", em_seed, "environment / sampler seed");
  emfit->add_option("--first", em_first, "first round index (0-based)");
  emfit->add_option("--count", em_count, "window length");
  emfit->add_option("--out", em_out, "output directory");

  std::string corr_log, corr_mode = "partial", corr_out;
  int corr_regime = 0;
  auto *corr = app.add_subcommand("correlate", "pairwise loss correlation matrix from a round log");
  corr->add_option("--log", corr_log, "round log CSV")->required()->check(CLI::ExistingFile);
  corr->add_option("--mode", corr_mode, "partial | full")->check(CLI::IsMember({"partial", "full"}));
  corr->add_option("--regime", corr_regime, "restrict to rounds of this regime (0 = all)");
  corr->add_option("--out", corr_out, "output CSV (default stdout)");

  std::string sum_in, sum_out;
  auto *exp = app.add_subcommand("export-summary", "aggregate summary.csv into mean +- SE per policy");
  exp->add_option("--summary", sum_in, "summary.csv")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", sum_out, "aggregate CSV path (text table goes to stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return do_run(run_args, false);
    if (*sweep) return do_run(sweep_args, true);
    if (*emfit) {
      const RunConfig cfg = config::load_run_config(em_config);
      const auto res = harness::em_fit(cfg, em_seed, em_first, em_count);
      const std::string dir = default_out(cfg, em_out);
      std::filesystem::create_directories(dir);
      {
        std::ofstream f(dir + "/em_fit_params.json");
        f << serialize::to_json(res.params).dump(2) << '\n';
      }
      std::ofstream f(dir + "/em_fit_trace.csv");
      f << "iteration,objective,objective_se\n";
      for (size_t i = 0; i < res.trace.objective.size(); ++i) {
        f << i << ',' << harness::fmt(res.trace.objective[i]) << ',' << harness::fmt(res.trace.objective_se[i])
          << '\n';
        std::cout << "iter " << i << ": objective " << res.trace.objective[i] << " (se " << res.trace.objective_se[i]
                  << ")\n";
      }
      std::cerr << "wrote " << dir << "/em_fit_params.json\n";
      return 0;
    }
    if (*corr) {
      const auto table = harness::read_csv_file(corr_log);
      const Mat c = harness::correlation_matrix(
          table, corr_mode == "full" ? harness::CorrelationMode::full : harness::CorrelationMode::partial,
          corr_regime);
      if (corr_out.empty()) {
        harness::write_matrix_csv(std::cout, c);
      } else {
        std::ofstream f(corr_out);
        harness::write_matrix_csv(f, c);
      }
      return 0;
    }
    if (*exp) {
      const auto agg = harness::aggregate_from_summary(harness::read_csv_file(sum_in));
      harness::write_aggregate_text(std::cout, agg);
      if (!sum_out.empty()) {
        std::ofstream f(sum_out);
        harness::write_aggregate_csv(f, agg);
      }
      return 0;
    }
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
