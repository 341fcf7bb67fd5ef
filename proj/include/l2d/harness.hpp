#pragma once

#include "l2d/baselines.hpp"
#include "l2d/common.hpp"
#include "l2d/config.hpp"
#include "l2d/environments.hpp"
#include "l2d/l2d_policy.hpp"
#include "l2d/policy.hpp"
#include "l2d/rng.hpp"
#include "l2d/serialize.hpp"
#include "l2d/slds_filter.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace l2d {

struct RoundRecord {
  int t = 0;
  int regime = 0;
  ExpertId chosen = 0;
  double cost = 0.0;
  double residual = 0.0;
  bool warmup = false;
  bool scored = true; // false for fixed-expert fallback rounds
  std::vector<int> available;     // per expert, 0/1
  std::vector<double> loss;       // potential cost of every expert (hindsight; never shown to policies)
  PolicyDiagnostics diag;
  std::string events;
};

struct RunSummary {
  std::string policy;
  std::uint64_t seed = 0;
  double mean_cost = 0.0; // Ĵ over scored rounds
  int rounds = 0;
  int scored = 0;
  int fallbacks = 0;
  int births = 0, prunes = 0, reentries = 0;
  int repaired_rows = 0;
  bool truncated = false;
  std::vector<double> selection_freq;                     // per expert, over scored rounds
  std::map<int, std::vector<double>> regime_selection_freq; // regime → per-expert frequency
  double wall_seconds = 0.0;
};

struct EpisodeResult {
  std::vector<RoundRecord> log;
  RunSummary summary;
  std::vector<EmLogEntry> em_log;
};

struct Aggregate {
  std::string policy;
  int n = 0;
  double mean = 0.0;
  double se = 0.0;
  bool single_run = false;
};

namespace harness {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string file_tag(const std::string &policy) {
  std::string s = policy;
  for (char &c : s) {
    if (c == ':' || c == '/') c = '-';
  }
  return s;
}

inline Environment build_environment(const RunConfig &cfg, std::uint64_t seed, int *repaired = nullptr) {
  if (repaired != nullptr) *repaired = 0;
  if (cfg.env_kind == "synthetic") return synthetic_stream(cfg.synthetic, seed);
  if (cfg.env_kind == "melbourne") return melbourne_stream(cfg.melbourne, seed, repaired);
  if (cfg.env_kind == "fred") return fred_stream(cfg.fred, repaired);
  throw ConfigError("unknown environment kind '" + cfg.env_kind + "'");
}

inline std::vector<double> expert_fees(const RunConfig &cfg, int num_experts) {
  std::vector<double> beta(static_cast<size_t>(num_experts), 0.0);
  if (cfg.beta.is_number()) {
    std::fill(beta.begin(), beta.end(), cfg.beta.get<double>());
  } else if (cfg.beta.is_array()) {
    if (static_cast<int>(cfg.beta.size()) != num_experts) throw ConfigError("beta: need one entry per expert");
    for (int k = 0; k < num_experts; ++k) beta[static_cast<size_t>(k)] = cfg.beta[static_cast<size_t>(k)].get<double>();
  } else {
    throw ConfigError("beta: expected a number or an array");
  }
  for (double b : beta) {
    if (b < 0.0) throw ConfigError("beta must be >= 0");
  }
  return beta;
}

/// Realized cost ‖ŷ − y‖² + β_k.
inline double realized_cost(const Vec &prediction, const Vec &target, double fee) {
  return (prediction - target).squaredNorm() + fee;
}

/// Per-regime matrices from a config value: a number (c·I), a matrix shared
/// by all regimes, or {"per_regime": [...]}.
inline std::vector<Mat> per_regime_matrices(const Json &j, int M, int d, const std::string &what) {
  std::vector<Mat> out;
  if (j.is_object()) {
    serialize::check_keys(j, {"per_regime"}, what);
    const Json &a = j.at("per_regime");
    if (!a.is_array() || static_cast<int>(a.size()) != M) {
      throw ConfigError(what + ".per_regime: expected one entry per regime");
    }
    for (int m = 0; m < M; ++m) out.push_back(serialize::mat_from_json(a[static_cast<size_t>(m)], d, d, what));
    return out;
  }
  const Mat shared = serialize::mat_from_json(j, d, d, what);
  for (int m = 0; m < M; ++m) out.push_back(shared);
  return out;
}

inline Mat loading_from_json(const Json &j, int d_alpha, int d_g) {
  if (j.is_number()) return Mat::Constant(d_alpha, d_g, j.get<double>());
  return serialize::mat_from_json(j, d_alpha, d_g, "model.initial_loading");
}

inline bool is_l2d(const std::string &policy) { return policy == "l2d-slds" || policy == "l2d-slds-no-g"; }

inline ModelParams build_model_params(const RunConfig &cfg, const std::string &policy, int num_experts,
                                      int context_dim, std::uint64_t seed) {
  const ModelConfig &mc = cfg.model;
  const bool no_g = policy == "l2d-slds-no-g";
  const std::vector<double> beta = expert_fees(cfg, num_experts);
  ModelParams p;
  if (mc.params) {
    p = serialize::model_params_from_json(*mc.params);
    if (p.d_context != context_dim) throw ConfigError("model.params: d_context does not match the environment");
    if (no_g) {
      p.d_g = 0;
      for (int m = 0; m < p.num_regimes; ++m) {
        p.A_g[m] = Mat(0, 0);
        p.Q_g[m] = Mat(0, 0);
        p.prior_g[m] = GaussianBelief::standard(0);
      }
      for (auto &[_, e] : p.experts) e.loading = Mat(p.d_alpha, 0);
    }
    for (int k = 0; k < num_experts; ++k) {
      if (auto it = p.experts.find(k); it != p.experts.end()) it->second.fee = beta[static_cast<size_t>(k)];
    }
    p.validate();
    return p;
  }
  const int M = mc.num_regimes;
  const int d_g = no_g ? 0 : mc.d_g;
  const int d_attn = mc.d_attn > 0 ? mc.d_attn : M;
  p = ModelParams::defaults(M, d_g, mc.d_alpha, context_dim, d_attn, mc.sigma_init, mc.stay);
  p.A_g = per_regime_matrices(mc.A_g, M, d_g, "model.A_g");
  p.Q_g = per_regime_matrices(mc.Q_g, M, d_g, "model.Q_g");
  p.A_u = per_regime_matrices(mc.A_u, M, mc.d_alpha, "model.A_u");
  p.Q_u = per_regime_matrices(mc.Q_u, M, mc.d_alpha, "model.Q_u");
  for (int m = 0; m < M; ++m) p.prior_g[m] = GaussianBelief::standard(d_g, mc.prior_g_var);

  const bool any_fee = std::any_of(beta.begin(), beta.end(), [](double b) { return b != 0.0; });
  if (mc.initial_loading || mc.initial_noise || any_fee) {
    Rng rng = derive_rng(seed, "initial-loading");
    std::normal_distribution<double> nd(0.0, mc.loading_scale);
    for (int k = 0; k < num_experts; ++k) {
      ExpertParams e;
      if (mc.initial_loading && d_g > 0) {
        const Json &jl = mc.initial_loading->is_object() ? mc.initial_loading->at(std::to_string(k))
                                                         : *mc.initial_loading;
        e.loading = loading_from_json(jl, mc.d_alpha, d_g);
      } else {
        e.loading = Mat::Zero(mc.d_alpha, d_g);
        if (mc.loading_init == RegistryPolicy::LoadingInit::small_random) {
          for (Eigen::Index i = 0; i < e.loading.size(); ++i) e.loading.data()[i] = nd(rng);
        }
      }
      const Mat r = mc.initial_noise ? serialize::mat_from_json(*mc.initial_noise, 1, 1, "model.initial_noise")
                                     : Mat::Identity(1, 1);
      e.noise.assign(static_cast<size_t>(M), r);
      e.fee = beta[static_cast<size_t>(k)];
      p.experts[k] = e;
    }
  }
  p.validate();
  return p;
}

inline FeatureMap build_feature_map(const RunConfig &cfg, int context_dim) {
  const ModelConfig &mc = cfg.model;
  if (mc.feature_map == "identity_pad") return FeatureMap::identity_pad(context_dim, mc.d_alpha);
  if (mc.feature_map == "intercept_pad") return FeatureMap::intercept_pad(context_dim, mc.d_alpha);
  if (mc.feature_map == "fixed_projection") {
    if (!mc.projection) throw ConfigError("model.feature_map fixed_projection needs model.projection");
    return FeatureMap::fixed_projection(
        serialize::mat_from_json(*mc.projection, mc.d_alpha, context_dim, "model.projection"));
  }
  throw ConfigError("model.feature_map: unknown kind '" + mc.feature_map + "'");
}

inline std::unique_ptr<L2dPolicy> make_l2d_policy(const RunConfig &cfg, const std::string &policy, int num_experts,
                                                  int context_dim, std::uint64_t seed) {
  ModelParams p = build_model_params(cfg, policy, num_experts, context_dim, seed);
  FilterConfig fc;
  fc.eps_w = cfg.model.eps_w;
  fc.joseph_form = cfg.model.joseph_form;
  RegistryPolicy rp;
  rp.delta_max = cfg.model.delta_max;
  rp.loading_init = cfg.model.loading_init;
  rp.loading_scale = cfg.model.loading_scale;
  SldsFilter filter(std::move(p), build_feature_map(cfg, context_dim), fc, rp, seed);
  L2dOptions opt;
  opt.router = cfg.router;
  opt.em = cfg.em.em;
  opt.em_warmup = cfg.em.warmup_fit;
  opt.em_online = cfg.em.online;
  opt.warmup = cfg.warmup;
  opt.seed = seed;
  return std::make_unique<L2dPolicy>(policy, std::move(filter), opt);
}

/// Partial-feedback policy by name; nullptr for "oracle".
inline std::unique_ptr<Policy> make_policy(const RunConfig &cfg, const std::string &policy, int num_experts,
                                           int context_dim, std::uint64_t seed) {
  if (is_l2d(policy)) return make_l2d_policy(cfg, policy, num_experts, context_dim, seed);
  if (policy == "linucb") {
    return std::make_unique<LinUcb>(num_experts, context_dim, cfg.linucb.alpha, cfg.linucb.lambda);
  }
  if (policy == "neuralucb") {
    const auto &n = cfg.neuralucb;
    return std::make_unique<NeuralUcb>(num_experts, context_dim, seed, n.alpha, n.lambda, n.learning_rate, n.hidden);
  }
  if (policy == "random") return std::make_unique<RandomPolicy>(seed);
  if (policy.rfind("fixed:", 0) == 0) {
    int k = -1;
    try {
      k = std::stoi(policy.substr(6));
    } catch (const std::exception &) {
      throw ConfigError("bad fixed policy '" + policy + "'");
    }
    if (k < 0 || k >= num_experts) throw ConfigError("fixed policy expert out of range: " + policy);
    return std::make_unique<FixedPolicy>(k, seed);
  }
  if (policy == "oracle") return nullptr;
  throw ConfigError("unknown policy '" + policy + "'");
}

/// Policies that learn from feedback get the round-robin warmup.
inline bool uses_warmup(const std::string &policy) {
  return is_l2d(policy) || policy == "linucb" || policy == "neuralucb";
}

inline RunSummary summarize(const std::string &policy, std::uint64_t seed, const std::vector<RoundRecord> &log,
                            int num_experts) {
  RunSummary s;
  s.policy = policy;
  s.seed = seed;
  s.rounds = static_cast<int>(log.size());
  s.selection_freq.assign(static_cast<size_t>(num_experts), 0.0);
  std::map<int, int> regime_counts;
  double total = 0.0;
  for (const auto &r : log) {
    std::istringstream ev(r.events);
    for (std::string tok; std::getline(ev, tok, ';');) {
      if (tok.rfind("birth", 0) == 0) ++s.births;
      else if (tok.rfind("prune", 0) == 0) ++s.prunes;
      else if (tok.rfind("reentry", 0) == 0) ++s.reentries;
    }
    if (!r.scored) {
      ++s.fallbacks;
      continue;
    }
    ++s.scored;
    total += r.cost;
    s.selection_freq[static_cast<size_t>(r.chosen)] += 1.0;
    if (r.regime > 0) {
      auto &f = s.regime_selection_freq[r.regime];
      f.resize(static_cast<size_t>(num_experts), 0.0);
      f[static_cast<size_t>(r.chosen)] += 1.0;
      ++regime_counts[r.regime];
    }
  }
  s.mean_cost = s.scored > 0 ? total / s.scored : std::numeric_limits<double>::quiet_NaN();
  if (s.scored > 0) {
    for (double &f : s.selection_freq) f /= s.scored;
  }
  for (auto &[z, f] : s.regime_selection_freq) {
    for (double &v : f) v /= regime_counts[z];
  }
  return s;
}

inline EpisodeResult run_episode(const RunConfig &cfg, const std::string &policy_name, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  int repaired = 0;
  const Environment env = build_environment(cfg, seed, &repaired);
  const int K = env.num_experts;
  const std::vector<double> beta = expert_fees(cfg, K);
  std::unique_ptr<Policy> policy = make_policy(cfg, policy_name, K, env.context_dim, seed);
  OraclePolicy oracle;
  auto *l2d = dynamic_cast<L2dPolicy *>(policy.get());
  auto *fixed = dynamic_cast<FixedPolicy *>(policy.get());
  const int warmup = uses_warmup(policy_name) ? cfg.warmup : 0;

  EpisodeResult out;
  out.log.reserve(env.rounds.size());
  size_t events_seen = 0;
  int index = 0;
  for (const Round &round : env.rounds) {
    const DecisionContext ctx{round.t, round.x, round.available};
    RoundRecord rec;
    rec.t = round.t;
    rec.regime = round.regime;
    rec.available.assign(static_cast<size_t>(K), 0);
    for (ExpertId k : round.available) rec.available[static_cast<size_t>(k)] = 1;
    std::map<ExpertId, double> costs;
    for (ExpertId k = 0; k < K; ++k) {
      const double c = realized_cost(round.predictions[static_cast<size_t>(k)], round.target,
                                     beta[static_cast<size_t>(k)]);
      rec.loss.push_back(c);
      if (rec.available[static_cast<size_t>(k)] != 0) costs[k] = c;
    }

    ExpertId chosen = 0;
    if (policy) {
      chosen = policy->select(ctx);
      rec.diag = policy->diagnostics();
      if (index < warmup) {
        chosen = round_robin(round.available, index);
        rec.warmup = true;
      }
      if (fixed != nullptr && fixed->last_was_fallback()) rec.scored = false;
    } else {
      chosen = oracle.select(ctx, costs);
    }
    if (rec.available[static_cast<size_t>(chosen)] == 0) {
      throw ProtocolError("policy " + policy_name + " chose unavailable expert " + std::to_string(chosen) +
                          " at t=" + std::to_string(round.t));
    }
    const Vec &pred = round.predictions[static_cast<size_t>(chosen)];
    rec.chosen = chosen;
    rec.cost = rec.loss[static_cast<size_t>(chosen)];
    rec.residual = (pred - round.target)(0);
    if (policy) {
      policy->update(ctx, Feedback{round.t, chosen, pred, round.target, rec.cost});
    }
    if (l2d != nullptr) {
      const auto &ev = l2d->filter().events();
      std::string s;
      for (; events_seen < ev.size(); ++events_seen) {
        if (!s.empty()) s += ';';
        s += ev[events_seen].kind + ":" + std::to_string(ev[events_seen].expert);
      }
      rec.events = s;
    }
    out.log.push_back(std::move(rec));
    ++index;
  }
  out.summary = summarize(policy_name, seed, out.log, K);
  out.summary.repaired_rows = repaired;
  const int requested = cfg.env_kind == "melbourne" ? cfg.melbourne.max_rounds
                        : cfg.env_kind == "fred"    ? cfg.fred.max_rounds
                                                    : cfg.synthetic.T;
  out.summary.truncated = requested > 0 && static_cast<int>(env.rounds.size()) < requested;
  if (l2d != nullptr) out.em_log = l2d->em_log();
  out.summary.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------------------
// Round log CSV

struct LogShape {
  int num_experts = 0;
  int num_regimes = 0;
  int d_g = 0;
};

inline LogShape log_shape(const RunConfig &cfg, int num_experts) {
  return {num_experts, cfg.model.num_regimes, cfg.model.d_g};
}

inline std::vector<std::string> log_header(const LogShape &s) {
  std::vector<std::string> h{"t", "policy", "seed", "regime", "chosen", "cost", "residual", "warmup", "scored"};
  for (const char *field : {"avail", "loss", "pred_cost", "gap", "ig_mode", "ig_factor", "ratio", "resid_mean"}) {
    for (int k = 0; k < s.num_experts; ++k) h.push_back(std::string(field) + "_" + std::to_string(k));
  }
  for (int m = 0; m < s.num_regimes; ++m) h.push_back("w_" + std::to_string(m));
  for (int i = 0; i < s.d_g; ++i) h.push_back("g_mean_" + std::to_string(i));
  for (int i = 0; i < s.d_g; ++i) h.push_back("g_var_" + std::to_string(i));
  h.push_back("events");
  return h;
}

inline void write_round_log(std::ostream &os, const LogShape &s, const std::string &policy, std::uint64_t seed,
                            const std::vector<RoundRecord> &log) {
  const auto header = log_header(s);
  for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  const double na = std::numeric_limits<double>::quiet_NaN();
  auto lookup = [&](const std::map<ExpertId, double> &m, int k) {
    auto it = m.find(k);
    return it == m.end() ? na : it->second;
  };
  for (const auto &r : log) {
    os << r.t << ',' << policy << ',' << seed << ',' << r.regime << ',' << r.chosen << ',' << fmt(r.cost) << ','
       << fmt(r.residual) << ',' << (r.warmup ? 1 : 0) << ',' << (r.scored ? 1 : 0);
    for (int k = 0; k < s.num_experts; ++k) os << ',' << r.available[static_cast<size_t>(k)];
    for (int k = 0; k < s.num_experts; ++k) os << ',' << fmt(r.loss[static_cast<size_t>(k)]);
    for (const auto *m : {&r.diag.predicted_cost, &r.diag.gap, &r.diag.ig_mode, &r.diag.ig_factor, &r.diag.ratio,
                          &r.diag.residual_mean}) {
      for (int k = 0; k < s.num_experts; ++k) os << ',' << fmt(lookup(*m, k));
    }
    for (int m = 0; m < s.num_regimes; ++m) {
      os << ',' << fmt(m < r.diag.regime_weights.size() ? r.diag.regime_weights(m) : na);
    }
    for (int i = 0; i < s.d_g; ++i) os << ',' << fmt(i < r.diag.g_mean.size() ? r.diag.g_mean(i) : na);
    for (int i = 0; i < s.d_g; ++i) os << ',' << fmt(i < r.diag.g_var.size() ? r.diag.g_var(i) : na);
    os << ',' << r.events << '\n';
  }
}

inline std::string round_log_string(const LogShape &s, const std::string &policy, std::uint64_t seed,
                                    const std::vector<RoundRecord> &log) {
  std::ostringstream os;
  write_round_log(os, s, policy, seed, log);
  return os.str();
}

inline void write_em_log(std::ostream &os, int num_regimes, const std::vector<EmLogEntry> &log) {
  os << "round,window_first,window_last,iteration,objective,objective_se";
  for (int m = 0; m < num_regimes; ++m) os << ",occupancy_" << m;
  os << ",norm_A_g,norm_Q_g,norm_A_u,norm_Q_u,norm_B\n";
  for (const auto &e : log) {
    os << e.round << ',' << e.window_first << ',' << e.window_last << ',' << e.iteration << ',' << fmt(e.objective)
       << ',' << fmt(e.objective_se);
    for (int m = 0; m < num_regimes; ++m) os << ',' << fmt(m < e.occupancy.size() ? e.occupancy(m) : 0.0);
    os << ',' << fmt(e.norm_a_g) << ',' << fmt(e.norm_q_g) << ',' << fmt(e.norm_a_u) << ',' << fmt(e.norm_q_u) << ','
       << fmt(e.norm_b) << '\n';
  }
}

/// Minimal CSV table. Double-quoted fields are accepted on input; the harness never writes them.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string &name) const {
    for (size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  }
  int require(const std::string &name) const {
    const int c = column(name);
    if (c < 0) throw ConfigError("csv: missing column '" + name + "'");
    return c;
  }
};

inline std::vector<std::string> split_csv_line(const std::string &line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"') {
      if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else {
        quoted = !quoted;
      }
    } else if (c == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline CsvTable read_csv(std::istream &in) {
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("csv: empty input");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size()) throw ConfigError("csv: ragged row");
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline CsvTable read_csv_file(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return read_csv(in);
}

inline double parse_cell(const std::string &s) {
  if (s == "NA" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

/// Ĵ recomputed from a round log: mean cost over scored rows.
inline double mean_cost_from_log(const CsvTable &t) {
  const int c = t.require("cost"), s = t.require("scored");
  double total = 0.0;
  int n = 0;
  for (const auto &row : t.rows) {
    if (row[static_cast<size_t>(s)] != "1") continue;
    total += std::stod(row[static_cast<size_t>(c)]);
    ++n;
  }
  return n > 0 ? total / n : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// Aggregation and correlation

/// Mean and standard error (sample std / √n); n = 1 gives SE 0, flagged.
inline Aggregate aggregate(const std::string &policy, const std::vector<double> &values) {
  if (values.empty()) throw ConfigError("aggregate: need at least one run");
  Aggregate a;
  a.policy = policy;
  a.n = static_cast<int>(values.size());
  for (double v : values) a.mean += v;
  a.mean /= a.n;
  if (a.n == 1) {
    a.single_run = true;
    return a;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.se = std::sqrt(ss / (a.n - 1)) / std::sqrt(static_cast<double>(a.n));
  return a;
}

/// Pairwise-complete Pearson correlation of columns (NaN = missing). Entries
/// with fewer than 2 joint observations or zero variance are NaN.
inline Mat pearson_matrix(const std::vector<std::vector<double>> &series) {
  const auto K = static_cast<Eigen::Index>(series.size());
  Mat c = Mat::Constant(K, K, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index i = 0; i < K; ++i) {
    for (Eigen::Index j = i; j < K; ++j) {
      const auto &a = series[static_cast<size_t>(i)];
      const auto &b = series[static_cast<size_t>(j)];
      double sa = 0, sb = 0;
      int n = 0;
      for (size_t r = 0; r < a.size(); ++r) {
        if (std::isnan(a[r]) || std::isnan(b[r])) continue;
        sa += a[r];
        sb += b[r];
        ++n;
      }
      if (n < 2) continue;
      const double ma = sa / n, mb = sb / n;
      double sab = 0, saa = 0, sbb = 0;
      for (size_t r = 0; r < a.size(); ++r) {
        if (std::isnan(a[r]) || std::isnan(b[r])) continue;
        sab += (a[r] - ma) * (b[r] - mb);
        saa += (a[r] - ma) * (a[r] - ma);
        sbb += (b[r] - mb) * (b[r] - mb);
      }
      if (saa <= 0.0 || sbb <= 0.0) continue;
      const double rho = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
      c(i, j) = c(j, i) = i == j ? 1.0 : rho;
    }
  }
  return c;
}

enum class CorrelationMode { partial, full };

/// Correlation of per-expert series from a round log.
/// full: potential losses of available experts (hindsight).
/// partial: the policy's per-round model output per expert; the L2D residual
/// mean when logged, otherwise the predicted cost. Warmup rows are skipped.
inline Mat correlation_matrix(const CsvTable &t, CorrelationMode mode, int regime = 0) {
  int K = 0;
  while (t.column("loss_" + std::to_string(K)) >= 0) ++K;
  const int reg = t.require("regime"), wu = t.require("warmup");
  std::vector<std::vector<double>> series(static_cast<size_t>(K));
  std::vector<int> src(static_cast<size_t>(K)), avail(static_cast<size_t>(K));
  bool use_resid = false;
  if (mode == CorrelationMode::partial) {
    const int c0 = t.require("resid_mean_0");
    for (const auto &row : t.rows) use_resid = use_resid || row[static_cast<size_t>(c0)] != "NA";
  }
  for (int k = 0; k < K; ++k) {
    const std::string ks = std::to_string(k);
    avail[static_cast<size_t>(k)] = t.require("avail_" + ks);
    src[static_cast<size_t>(k)] = mode == CorrelationMode::full ? t.require("loss_" + ks)
                                  : use_resid                  ? t.require("resid_mean_" + ks)
                                                               : t.require("pred_cost_" + ks);
  }
  for (const auto &row : t.rows) {
    if (regime > 0 && std::stoi(row[static_cast<size_t>(reg)]) != regime) continue;
    if (mode == CorrelationMode::partial && row[static_cast<size_t>(wu)] == "1") continue;
    for (int k = 0; k < K; ++k) {
      const bool on = row[static_cast<size_t>(avail[static_cast<size_t>(k)])] == "1";
      series[static_cast<size_t>(k)].push_back(
          on ? parse_cell(row[static_cast<size_t>(src[static_cast<size_t>(k)])])
             : std::numeric_limits<double>::quiet_NaN());
    }
  }
  return pearson_matrix(series);
}

inline void write_matrix_csv(std::ostream &os, const Mat &m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << "expert_" << j;
  os << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << fmt(m(i, j));
    os << '\n';
  }
}

/// Mean off-diagonal correlation within groups {0,1},{2,3} minus across groups.
struct BlockContrast {
  double within = 0.0, cross = 0.0;
};

inline BlockContrast block_contrast(const Mat &c) {
  const double within = 0.5 * (c(0, 1) + c(2, 3));
  const double cross = 0.25 * (c(0, 2) + c(0, 3) + c(1, 2) + c(1, 3));
  return {within, cross};
}

// ---------------------------------------------------------------------------
// Output: per-run logs, summary.csv / summary.json, aggregate.csv

inline void write_summary_csv(std::ostream &os, const std::vector<RunSummary> &runs, int num_experts) {
  os << "policy,seed,mean_cost,rounds,scored,fallbacks,births,prunes,reentries,repaired_rows,truncated";
  for (int k = 0; k < num_experts; ++k) os << ",freq_" << k;
  os << '\n';
  for (const auto &r : runs) {
    os << r.policy << ',' << r.seed << ',' << fmt(r.mean_cost) << ',' << r.rounds << ',' << r.scored << ','
       << r.fallbacks << ',' << r.births << ',' << r.prunes << ',' << r.reentries << ',' << r.repaired_rows << ','
       << (r.truncated ? 1 : 0);
    for (int k = 0; k < num_experts; ++k) {
      os << ',' << fmt(k < static_cast<int>(r.selection_freq.size()) ? r.selection_freq[static_cast<size_t>(k)] : 0.0);
    }
    os << '\n';
  }
}

inline std::vector<Aggregate> aggregate_by_policy(const std::vector<RunSummary> &runs,
                                                  const std::vector<std::string> &order) {
  std::vector<Aggregate> out;
  for (const auto &p : order) {
    std::vector<double> v;
    for (const auto &r : runs) {
      if (r.policy == p && !std::isnan(r.mean_cost)) v.push_back(r.mean_cost);
    }
    if (!v.empty()) out.push_back(aggregate(p, v));
  }
  return out;
}

inline void write_aggregate_csv(std::ostream &os, const std::vector<Aggregate> &agg) {
  os << "policy,n,mean_cost,se,single_run\n";
  for (const auto &a : agg) {
    os << a.policy << ',' << a.n << ',' << fmt(a.mean) << ',' << fmt(a.se) << ',' << (a.single_run ? 1 : 0) << '\n';
  }
}

inline void write_aggregate_text(std::ostream &os, const std::vector<Aggregate> &agg) {
  size_t w = 6;
  for (const auto &a : agg) w = std::max(w, a.policy.size());
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s  %10s  %10s  %3s\n", static_cast<int>(w), "policy", "mean", "se", "n");
  os << buf;
  for (const auto &a : agg) {
    std::snprintf(buf, sizeof buf, "%-*s  %10.4f  %10.4f  %3d%s\n", static_cast<int>(w), a.policy.c_str(), a.mean,
                  a.se, a.n, a.single_run ? "  (single run)" : "");
    os << buf;
  }
}

inline Json summary_json(const std::vector<RunSummary> &runs, const std::vector<Aggregate> &agg) {
  Json j;
  Json rs = Json::array();
  for (const auto &r : runs) {
    Json o{{"policy", r.policy},       {"seed", r.seed},         {"mean_cost", r.mean_cost},
           {"rounds", r.rounds},       {"scored", r.scored},     {"fallbacks", r.fallbacks},
           {"births", r.births},       {"prunes", r.prunes},     {"reentries", r.reentries},
           {"repaired_rows", r.repaired_rows}, {"truncated", r.truncated}, {"selection_freq", r.selection_freq},
           {"wall_seconds", r.wall_seconds}};
    Json rf = Json::object();
    for (const auto &[z, f] : r.regime_selection_freq) rf[std::to_string(z)] = f;
    o["regime_selection_freq"] = rf;
    rs.push_back(o);
  }
  j["runs"] = rs;
  Json ag = Json::array();
  for (const auto &a : agg) {
    ag.push_back({{"policy", a.policy}, {"n", a.n}, {"mean_cost", a.mean}, {"se", a.se}, {"single_run", a.single_run}});
  }
  j["aggregate"] = ag;
  return j;
}

inline std::string round_log_path(const std::string &dir, const std::string &policy, std::uint64_t seed) {
  return dir + "/rounds_" + file_tag(policy) + "_seed" + std::to_string(seed) + ".csv";
}

inline std::string em_log_path(const std::string &dir, const std::string &policy, std::uint64_t seed) {
  return dir + "/em_" + file_tag(policy) + "_seed" + std::to_string(seed) + ".csv";
}

struct SweepResult {
  std::vector<RunSummary> runs;
  std::vector<Aggregate> aggregate;
  int num_experts = 0;
};

/// Runs every (policy, seed) pair with up to cfg.workers threads; writes
/// per-run logs plus summary.csv, summary.json and aggregate.csv into `dir`.
inline SweepResult run_sweep(const RunConfig &cfg, const std::string &dir, std::ostream *progress = nullptr) {
  std::filesystem::create_directories(dir);
  struct Job {
    std::string policy;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto &p : cfg.policies) {
    for (auto s : cfg.seeds) jobs.push_back({p, s});
  }
  std::vector<RunSummary> results(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::atomic<size_t> next{0};
  std::mutex io;
  int num_experts = 0;
  auto worker = [&] {
    for (size_t i = next++; i < jobs.size(); i = next++) {
      try {
        EpisodeResult r = run_episode(cfg, jobs[i].policy, jobs[i].seed);
        const int K = static_cast<int>(r.summary.selection_freq.size());
        {
          std::ofstream f(round_log_path(dir, jobs[i].policy, jobs[i].seed));
          write_round_log(f, log_shape(cfg, K), jobs[i].policy, jobs[i].seed, r.log);
        }
        if (!r.em_log.empty()) {
          std::ofstream f(em_log_path(dir, jobs[i].policy, jobs[i].seed));
          write_em_log(f, cfg.model.num_regimes, r.em_log);
        }
        std::lock_guard<std::mutex> lock(io);
        num_experts = K;
        results[i] = std::move(r.summary);
        if (progress != nullptr) {
          *progress << jobs[i].policy << " seed " << jobs[i].seed << ": J = " << fmt(results[i].mean_cost) << " ("
                    << results[i].wall_seconds << " s)\n";
        }
      } catch (const std::exception &e) {
        errors[i] = e.what();
      }
    }
  };
  const int nw = std::max(1, std::min<int>(cfg.workers, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < nw; ++w) pool.emplace_back(worker);
  worker();
  for (auto &t : pool) t.join();
  for (size_t i = 0; i < jobs.size(); ++i) {
    if (!errors[i].empty()) {
      throw std::runtime_error(jobs[i].policy + " seed " + std::to_string(jobs[i].seed) + ": " + errors[i]);
    }
  }
  SweepResult out;
  out.runs = std::move(results);
  out.aggregate = aggregate_by_policy(out.runs, cfg.policies);
  out.num_experts = num_experts;
  {
    std::ofstream f(dir + "/summary.csv");
    write_summary_csv(f, out.runs, num_experts);
  }
  {
    std::ofstream f(dir + "/summary.json");
    f << summary_json(out.runs, out.aggregate).dump(2) << '\n';
  }
  {
    std::ofstream f(dir + "/aggregate.csv");
    write_aggregate_csv(f, out.aggregate);
  }
  return out;
}

struct EmFitResult {
  ModelParams params;
  EmTrace trace;
  std::vector<WindowRound> window;
};

/// Offline MC-EM on `count` rounds starting at round index `first`, with
/// round-robin querying so every expert is observed.
inline EmFitResult em_fit(const RunConfig &cfg, std::uint64_t seed, int first, int count) {
  const Environment env = build_environment(cfg, seed);
  if (first < 0 || count < 2 || first + count > static_cast<int>(env.rounds.size())) {
    throw ConfigError("em-fit: window outside the environment");
  }
  const std::vector<double> beta = expert_fees(cfg, env.num_experts);
  EmFitResult out;
  out.params = build_model_params(cfg, "l2d-slds", env.num_experts, env.context_dim, seed);
  const FeatureMap fm = build_feature_map(cfg, env.context_dim);
  for (int i = first; i < first + count; ++i) {
    const Round &r = env.rounds[static_cast<size_t>(i)];
    const ExpertId k = round_robin(r.available, i - first);
    out.window.push_back({r.t, r.x, fm.apply(r.x), k, r.predictions[static_cast<size_t>(k)] - r.target});
  }
  const ExpertSet experts = learning::queried_experts(out.window);
  learning::ensure_expert_params(out.params, experts);
  for (ExpertId k : experts) out.params.experts[k].fee = beta[static_cast<size_t>(k)];
  Rng rng = derive_rng(seed, "em-fit");
  out.params = learning::run_mcem(out.window, out.params, cfg.em.em, cfg.em.em.n_em, rng,
                                  learning::default_window_prior(out.params, experts), &out.trace);
  return out;
}

/// Aggregate from an existing summary.csv.
inline std::vector<Aggregate> aggregate_from_summary(const CsvTable &t) {
  const int pc = t.require("policy"), jc = t.require("mean_cost");
  std::vector<std::string> order;
  std::vector<RunSummary> runs;
  for (const auto &row : t.rows) {
    RunSummary r;
    r.policy = row[static_cast<size_t>(pc)];
    r.mean_cost = parse_cell(row[static_cast<size_t>(jc)]);
    if (std::find(order.begin(), order.end(), r.policy) == order.end()) order.push_back(r.policy);
    runs.push_back(r);
  }
  return aggregate_by_policy(runs, order);
}

} // namespace harness
} // namespace l2d
