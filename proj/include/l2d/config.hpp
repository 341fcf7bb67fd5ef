#pragma once

#include "l2d/common.hpp"
#include "l2d/environments.hpp"
#include "l2d/learning.hpp"
#include "l2d/registry.hpp"
#include "l2d/router.hpp"
#include "l2d/serialize.hpp"

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace l2d {

struct ModelConfig {
  int num_regimes = 2;
  int d_g = 1;
  int d_alpha = 1;
  int d_attn = 0; // 0 → num_regimes
  std::string feature_map = "identity_pad"; // identity_pad | intercept_pad | fixed_projection
  std::optional<Json> projection;           // d_alpha × d_context for fixed_projection
  double stay = 0.95;
  double sigma_init = 1.0;
  double prior_g_var = 1.0;
  Json A_g = 1.0, Q_g = 0.01, A_u = 1.0, Q_u = 0.01; // scalar, per-regime list, or matrices
  std::optional<Json> initial_loading;              // B for every expert known up front
  std::optional<Json> initial_noise;                // R for every expert known up front
  int delta_max = 500;
  double eps_w = 1e-6;
  bool joseph_form = false;
  RegistryPolicy::LoadingInit loading_init = RegistryPolicy::LoadingInit::zero;
  double loading_scale = 0.1;
  std::optional<Json> params; // full ModelParams document (overrides everything above)
};

struct LinUcbConfig {
  double alpha = 5.0;
  double lambda = 1.0;
};

struct NeuralUcbConfig {
  double alpha = 5.0;
  double lambda = 1.0;
  double learning_rate = 1e-3;
  int hidden = 16;
};

struct EmSwitches {
  bool warmup_fit = false;
  bool online = false;
  EmConfig em;
};

struct RunConfig {
  std::string env_kind = "synthetic";
  SyntheticConfig synthetic;
  MelbourneConfig melbourne;
  FredConfig fred;
  std::vector<std::string> policies{"l2d-slds"};
  ModelConfig model;
  RouterConfig router;
  EmSwitches em;
  LinUcbConfig linucb;
  NeuralUcbConfig neuralucb;
  Json beta = 0.0; // scalar or per-expert array
  int warmup = 100;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir;
  int workers = 1;
  bool log_scores = true;
  std::string base_dir; // directory of the config file, for relative data paths
};

namespace config {

using serialize::check_keys;

inline std::vector<UnavailabilityWindow> parse_windows(const Json &j) {
  std::vector<UnavailabilityWindow> out;
  for (const auto &w : j) {
    check_keys(w, {"expert", "first", "last"}, "unavailable[]");
    out.push_back({w.at("expert").get<int>(), w.at("first").get<int>(), w.at("last").get<int>()});
  }
  return out;
}

inline std::chrono::year_month_day parse_ymd(const Json &j) {
  auto d = parse_date(j.get<std::string>());
  if (!d) throw ConfigError("bad date '" + j.get<std::string>() + "'");
  return *d;
}

inline std::string resolve_path(const std::string &p, const std::string &base) {
  if (p.empty() || p.front() == '/' || base.empty()) return p;
  std::ifstream probe(p);
  if (probe) return p;
  return base + "/" + p;
}

inline void parse_environment(const Json &j, RunConfig &c) {
  if (!j.contains("kind")) throw ConfigError("environment: missing 'kind'");
  c.env_kind = j.at("kind").get<std::string>();
  if (c.env_kind == "synthetic") {
    check_keys(j, {"kind", "T", "block_length", "ar", "d1", "d2", "sigma_y", "sigma_hi", "sigma_lo", "sigma_id", "y0",
                   "unavailable"},
               "environment");
    auto &s = c.synthetic;
    s.T = j.value("T", s.T);
    s.block_length = j.value("block_length", s.block_length);
    s.ar = j.value("ar", s.ar);
    s.d1 = j.value("d1", s.d1);
    s.d2 = j.value("d2", s.d2);
    s.sigma_y = j.value("sigma_y", s.sigma_y);
    s.sigma_hi = j.value("sigma_hi", s.sigma_hi);
    s.sigma_lo = j.value("sigma_lo", s.sigma_lo);
    s.sigma_id = j.value("sigma_id", s.sigma_id);
    if (j.contains("y0")) s.y0 = j.at("y0").get<double>();
    if (j.contains("unavailable")) s.unavailable = parse_windows(j.at("unavailable"));
    s.validate();
  } else if (c.env_kind == "melbourne") {
    check_keys(j, {"kind", "csv", "context_lags", "zscore_window", "zscore_eps", "experts", "unavailable", "max_rounds"},
               "environment");
    auto &m = c.melbourne;
    if (j.contains("csv")) m.csv_path = j.at("csv").get<std::string>();
    m.csv_path = resolve_path(m.csv_path, c.base_dir);
    if (j.contains("context_lags")) m.context_lags = j.at("context_lags").get<std::vector<int>>();
    m.zscore_window = j.value("zscore_window", m.zscore_window);
    m.zscore_eps = j.value("zscore_eps", m.zscore_eps);
    m.max_rounds = j.value("max_rounds", m.max_rounds);
    if (j.contains("experts")) {
      m.experts.clear();
      for (const auto &e : j.at("experts")) {
        check_keys(e, {"lags", "lambda", "noise_std"}, "environment.experts[]");
        m.experts.push_back({e.at("lags").get<std::vector<int>>(), e.value("lambda", 1.0), e.value("noise_std", 0.0)});
      }
    }
    if (j.contains("unavailable")) m.unavailable = parse_windows(j.at("unavailable"));
  } else if (c.env_kind == "fred") {
    check_keys(j, {"kind", "csv", "context_lags", "zscore_rows", "zscore_eps", "ridge_lambda", "training_windows",
                   "max_rounds"},
               "environment");
    auto &f = c.fred;
    if (j.contains("csv")) f.csv_path = j.at("csv").get<std::string>();
    f.csv_path = resolve_path(f.csv_path, c.base_dir);
    if (j.contains("context_lags")) f.context_lags = j.at("context_lags").get<std::vector<int>>();
    f.zscore_rows = j.value("zscore_rows", f.zscore_rows);
    f.zscore_eps = j.value("zscore_eps", f.zscore_eps);
    f.ridge_lambda = j.value("ridge_lambda", f.ridge_lambda);
    f.max_rounds = j.value("max_rounds", f.max_rounds);
    if (j.contains("training_windows")) {
      f.training_windows.clear();
      for (const auto &w : j.at("training_windows")) {
        check_keys(w, {"first", "last"}, "environment.training_windows[]");
        f.training_windows.push_back({parse_ymd(w.at("first")), parse_ymd(w.at("last"))});
      }
    }
  } else {
    throw ConfigError("environment: unknown kind '" + c.env_kind + "'");
  }
}

inline void parse_model(const Json &j, ModelConfig &m) {
  check_keys(j, {"num_regimes", "d_g", "d_alpha", "d_attn", "feature_map", "projection", "stay", "sigma_init",
                 "prior_g_var", "A_g", "Q_g", "A_u", "Q_u", "initial_loading", "initial_noise", "delta_max", "eps_w",
                 "joseph_form", "loading_init", "loading_scale", "params"},
             "model");
  m.num_regimes = j.value("num_regimes", m.num_regimes);
  m.d_g = j.value("d_g", m.d_g);
  m.d_alpha = j.value("d_alpha", m.d_alpha);
  m.d_attn = j.value("d_attn", m.d_attn);
  m.feature_map = j.value("feature_map", m.feature_map);
  if (j.contains("projection")) m.projection = j.at("projection");
  m.stay = j.value("stay", m.stay);
  m.sigma_init = j.value("sigma_init", m.sigma_init);
  m.prior_g_var = j.value("prior_g_var", m.prior_g_var);
  for (auto [key, dst] : {std::pair{"A_g", &m.A_g}, std::pair{"Q_g", &m.Q_g}, std::pair{"A_u", &m.A_u},
                          std::pair{"Q_u", &m.Q_u}}) {
    if (j.contains(key)) *dst = j.at(key);
  }
  if (j.contains("initial_loading")) m.initial_loading = j.at("initial_loading");
  if (j.contains("initial_noise")) m.initial_noise = j.at("initial_noise");
  m.delta_max = j.value("delta_max", m.delta_max);
  m.eps_w = j.value("eps_w", m.eps_w);
  m.joseph_form = j.value("joseph_form", m.joseph_form);
  if (j.contains("loading_init")) {
    const auto s = j.at("loading_init").get<std::string>();
    if (s == "zero") m.loading_init = RegistryPolicy::LoadingInit::zero;
    else if (s == "small_random") m.loading_init = RegistryPolicy::LoadingInit::small_random;
    else throw ConfigError("model.loading_init: expected 'zero' or 'small_random'");
  }
  m.loading_scale = j.value("loading_scale", m.loading_scale);
  if (j.contains("params")) m.params = j.at("params");
  if (m.num_regimes < 1 || m.d_g < 0 || m.d_alpha < 1) throw ConfigError("model: invalid dimensions");
}

inline void parse_em(const Json &j, EmSwitches &s) {
  check_keys(j, {"warmup_fit", "online", "n_em", "n_samp", "n_burn", "eps_n", "lambda_theta", "lambda_b", "window",
                 "period", "n_em_window", "theta_steps", "theta_step", "cov_floor", "learn_transitions",
                 "learn_dynamics", "learn_emission"},
             "em");
  s.warmup_fit = j.value("warmup_fit", s.warmup_fit);
  s.online = j.value("online", s.online);
  auto &e = s.em;
  e.n_em = j.value("n_em", e.n_em);
  e.n_samp = j.value("n_samp", e.n_samp);
  e.n_burn = j.value("n_burn", e.n_burn);
  e.eps_n = j.value("eps_n", e.eps_n);
  e.lambda_theta = j.value("lambda_theta", e.lambda_theta);
  e.lambda_b = j.value("lambda_b", e.lambda_b);
  e.window = j.value("window", e.window);
  e.period = j.value("period", e.period);
  e.n_em_window = j.value("n_em_window", e.n_em_window);
  e.theta_steps = j.value("theta_steps", e.theta_steps);
  e.theta_step = j.value("theta_step", e.theta_step);
  e.cov_floor = j.value("cov_floor", e.cov_floor);
  e.learn_transitions = j.value("learn_transitions", e.learn_transitions);
  e.learn_dynamics = j.value("learn_dynamics", e.learn_dynamics);
  e.learn_emission = j.value("learn_emission", e.learn_emission);
  e.validate();
}

inline RunConfig parse_run_config(const Json &j, const std::string &base_dir = {}) {
  check_keys(j, {"environment", "policies", "model", "router", "em", "linucb", "neuralucb", "beta", "warmup", "seeds",
                 "output_dir", "workers", "log_scores", "description"},
             "config");
  RunConfig c;
  c.base_dir = base_dir;
  if (j.contains("environment")) parse_environment(j.at("environment"), c);
  if (j.contains("policies")) c.policies = j.at("policies").get<std::vector<std::string>>();
  if (j.contains("model")) parse_model(j.at("model"), c.model);
  if (j.contains("router")) {
    const Json &r = j.at("router");
    check_keys(r, {"eps_ig", "ig_samples", "gap_offset"}, "router");
    c.router.eps_ig = r.value("eps_ig", c.router.eps_ig);
    c.router.ig_samples = r.value("ig_samples", c.router.ig_samples);
    c.router.gap_offset = r.value("gap_offset", c.router.gap_offset);
  }
  if (j.contains("em")) parse_em(j.at("em"), c.em);
  if (j.contains("linucb")) {
    const Json &r = j.at("linucb");
    check_keys(r, {"alpha", "lambda"}, "linucb");
    c.linucb.alpha = r.value("alpha", c.linucb.alpha);
    c.linucb.lambda = r.value("lambda", c.linucb.lambda);
  }
  if (j.contains("neuralucb")) {
    const Json &r = j.at("neuralucb");
    check_keys(r, {"alpha", "lambda", "learning_rate", "hidden"}, "neuralucb");
    c.neuralucb.alpha = r.value("alpha", c.neuralucb.alpha);
    c.neuralucb.lambda = r.value("lambda", c.neuralucb.lambda);
    c.neuralucb.learning_rate = r.value("learning_rate", c.neuralucb.learning_rate);
    c.neuralucb.hidden = r.value("hidden", c.neuralucb.hidden);
  }
  if (j.contains("beta")) c.beta = j.at("beta");
  c.warmup = j.value("warmup", c.warmup);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  c.workers = j.value("workers", c.workers);
  c.log_scores = j.value("log_scores", c.log_scores);
  if (c.warmup < 0) throw ConfigError("warmup must be >= 0");
  if (c.seeds.empty()) throw ConfigError("seeds must be nonempty");
  return c;
}

inline RunConfig load_run_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error &e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  const auto slash = path.find_last_of('/');
  return parse_run_config(j, slash == std::string::npos ? std::string{} : path.substr(0, slash));
}

} // namespace config
} // namespace l2d
