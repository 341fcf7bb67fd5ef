#pragma once

#include "l2d/common.hpp"
#include "l2d/linalg.hpp"
#include "l2d/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace l2d {

/// One interaction round. Policies only ever see (t, x, available) before
/// acting and (prediction[I_t], target) after; the harness owns the rest.
struct Round {
  int t = 0;
  Vec x;
  ExpertSet available;
  Vec target;
  std::vector<Vec> predictions; // indexed by expert id, computed for every expert
  int regime = 0;               // ground-truth label (1-based) or 0 when unknown
};

struct Environment {
  std::string name;
  int num_experts = 0;
  int context_dim = 0;
  std::vector<Round> rounds;
};

struct UnavailabilityWindow {
  ExpertId expert = 0;
  int first = 0; // inclusive
  int last = 0;  // inclusive
};

inline ExpertSet available_at(int t, int num_experts, const std::vector<UnavailabilityWindow> &gaps) {
  ExpertSet out;
  for (ExpertId k = 0; k < num_experts; ++k) {
    bool off = false;
    for (const auto &g : gaps) off = off || (g.expert == k && t >= g.first && t <= g.last);
    if (!off) out.push_back(k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic regime-correlation simulator

struct SyntheticConfig {
  int T = 3000;
  int block_length = 150;
  double ar = 0.8;
  double d1 = 2.0, d2 = -2.0;
  double sigma_y = 0.5;
  double sigma_hi = 2.0, sigma_lo = 0.1;
  double sigma_id = 0.3;
  std::optional<double> y0; // default: stationary mean of regime 1, d1 / (1 − ar)
  std::vector<UnavailabilityWindow> unavailable{{1, 2000, 2500}};

  void validate() const {
    if (T < 1 || block_length < 1) throw ConfigError("synthetic: T and block_length must be >= 1");
    if (!(sigma_hi > sigma_lo && sigma_lo > 0.0)) throw ConfigError("synthetic: need sigma_hi > sigma_lo > 0");
    if (sigma_y < 0.0 || sigma_id < 0.0) throw ConfigError("synthetic: noise scales must be >= 0");
  }
};

inline int synthetic_regime(int t, int block_length) { return 1 + ((t - 1) / block_length) % 2; }

/// Expert group g(k) ∈ {1, 2}: experts {0,1} → 1, {2,3} → 2.
inline int synthetic_group(ExpertId k) { return (k == 2 || k == 3) ? 2 : 1; }

inline Environment synthetic_stream(const SyntheticConfig &cfg, std::uint64_t seed) {
  cfg.validate();
  Environment env;
  env.name = "synthetic";
  env.num_experts = 4;
  env.context_dim = 1;
  Rng rng = derive_rng(seed, "synthetic");
  std::normal_distribution<double> n01(0.0, 1.0);
  const double b[4] = {cfg.d1, cfg.d1, cfg.d2, cfg.d2};
  double y_prev = cfg.y0 ? *cfg.y0 : cfg.d1 / (1.0 - cfg.ar);
  for (int t = 1; t <= cfg.T; ++t) {
    const int z = synthetic_regime(t, cfg.block_length);
    const double d = z == 1 ? cfg.d1 : cfg.d2;
    // Fixed draw order per round keeps the stream independent of any policy.
    const double eta = cfg.sigma_y * n01(rng);
    const double sd1 = z == 1 ? cfg.sigma_hi : cfg.sigma_lo;
    const double sd2 = z == 1 ? cfg.sigma_lo : cfg.sigma_hi;
    const double s1 = sd1 * n01(rng);
    const double s2 = sd2 * n01(rng);
    double eps[4];
    for (double &e : eps) e = cfg.sigma_id * n01(rng);
    const double y = cfg.ar * y_prev + d + eta;
    Round r;
    r.t = t;
    r.x = Vec::Constant(1, y_prev);
    r.available = available_at(t, 4, cfg.unavailable);
    r.target = Vec::Constant(1, y);
    r.regime = z;
    for (ExpertId k = 0; k < 4; ++k) {
      const double s = synthetic_group(k) == 1 ? s1 : s2;
      r.predictions.push_back(Vec::Constant(1, cfg.ar * y_prev + b[k] + s + eps[k]));
    }
    env.rounds.push_back(std::move(r));
    y_prev = y;
  }
  return env;
}

// ---------------------------------------------------------------------------
// CSV series

struct DatedValue {
  std::chrono::year_month_day date;
  double value = 0.0;
};

struct SeriesLoad {
  std::vector<DatedValue> rows;
  int repaired = 0; // rows whose value was forward-filled
};

inline std::string trim(const std::string &s) {
  const auto a = s.find_first_not_of(" \t\r\n\"'");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n\"'");
  return s.substr(a, b - a + 1);
}

inline std::optional<std::chrono::year_month_day> parse_date(const std::string &s) {
  int y = 0, m = 0, d = 0;
  char c1 = 0, c2 = 0;
  std::istringstream is(trim(s));
  if (!(is >> y >> c1 >> m >> c2 >> d) || c1 != '-' || c2 != '-') return std::nullopt;
  std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
                                  std::chrono::day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  return ymd;
}

/// Numeric value with stray non-numeric prefixes stripped ("?0.2" → 0.2).
inline std::optional<double> parse_value(const std::string &raw) {
  std::string s = trim(raw);
  const auto pos = s.find_first_of("0123456789-+.");
  if (pos == std::string::npos) return std::nullopt;
  s = s.substr(pos);
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == 0 || !std::isfinite(v)) return std::nullopt;
    return v;
  } catch (const std::exception &) {
    return std::nullopt;
  }
}

/// Two-column (date, value) CSV with a header row. Values that do not parse
/// (including the '.' missing sentinel) are forward-filled.
inline SeriesLoad read_dated_series(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open series file '" + path + "'");
  SeriesLoad out;
  std::string line;
  bool header = true;
  std::optional<double> last;
  int pending = 0; // unparseable rows before the first valid value
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError("series file '" + path + "': malformed row '" + line + "'");
    auto date = parse_date(line.substr(0, comma));
    if (!date) throw ConfigError("series file '" + path + "': bad date in row '" + line + "'");
    const std::string vs = trim(line.substr(comma + 1));
    std::optional<double> v = vs == "." ? std::nullopt : parse_value(vs);
    if (!v) {
      ++out.repaired;
      if (!last) {
        ++pending;
        out.rows.push_back({*date, std::numeric_limits<double>::quiet_NaN()});
        continue;
      }
      v = last;
    }
    last = v;
    out.rows.push_back({*date, *v});
  }
  // Leading gaps take the first valid value.
  if (pending > 0) {
    if (!last) throw ConfigError("series file '" + path + "' has no numeric values");
    double first = 0.0;
    for (const auto &r : out.rows)
      if (!std::isnan(r.value)) {
        first = r.value;
        break;
      }
    for (auto &r : out.rows)
      if (std::isnan(r.value)) r.value = first;
  }
  return out;
}

inline Vec calendar_features(const std::chrono::year_month_day &d) {
  const double two_pi = 2.0 * std::numbers::pi;
  const unsigned dow = std::chrono::weekday{std::chrono::sys_days{d}}.c_encoding();
  const unsigned mon = static_cast<unsigned>(d.month()) - 1;
  Vec f(4);
  f << std::sin(two_pi * dow / 7.0), std::cos(two_pi * dow / 7.0), std::sin(two_pi * mon / 12.0),
      std::cos(two_pi * mon / 12.0);
  return f;
}

// ---------------------------------------------------------------------------
// Ridge autoregressive experts

struct RidgeModel {
  Vec weights;
  double intercept = 0.0;
  double predict(const Vec &features) const { return weights.dot(features) + intercept; }
};

/// Ridge regression with an unpenalized intercept (fit on centered data).
inline RidgeModel fit_ridge(const Mat &features, const Vec &targets, double lambda) {
  if (features.rows() != targets.size() || features.rows() == 0) {
    throw ConfigError("fit_ridge: empty or mismatched design");
  }
  const Vec mean_x = features.colwise().mean().transpose();
  const double mean_y = targets.mean();
  const Mat xc = features.rowwise() - mean_x.transpose();
  const Vec yc = targets.array() - mean_y;
  Mat gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;
  RidgeModel m;
  m.weights = linalg::solve_spd(gram, xc.transpose() * yc);
  m.intercept = mean_y - mean_x.dot(m.weights);
  return m;
}

inline Vec lag_vector(const std::vector<double> &series, size_t index, const std::vector<int> &lags) {
  Vec v(static_cast<Eigen::Index>(lags.size()));
  for (size_t j = 0; j < lags.size(); ++j) v(static_cast<Eigen::Index>(j)) = series[index - lags[j]];
  return v;
}

inline int max_lag(const std::vector<int> &lags) {
  int m = 0;
  for (int l : lags) m = std::max(m, l);
  return m;
}

/// AR ridge fit of series[i] on series[i − lag] over i ∈ [first, last] (0-based).
inline RidgeModel fit_ridge_ar(const std::vector<double> &series, const std::vector<int> &lags, double lambda,
                               size_t first, size_t last) {
  const size_t ml = static_cast<size_t>(max_lag(lags));
  first = std::max(first, ml);
  if (last >= series.size() || first > last) throw ConfigError("fit_ridge_ar: history shorter than the largest lag");
  const auto n = static_cast<Eigen::Index>(last - first + 1);
  Mat x(n, static_cast<Eigen::Index>(lags.size()));
  Vec y(n);
  for (size_t i = first; i <= last; ++i) {
    x.row(static_cast<Eigen::Index>(i - first)) = lag_vector(series, i, lags).transpose();
    y(static_cast<Eigen::Index>(i - first)) = series[i];
  }
  return fit_ridge(x, y, lambda);
}

struct ArExpertSpec {
  std::vector<int> lags;
  double lambda = 1.0;
  double noise_std = 0.0;
};

/// Fitted AR ridge expert; prediction noise is drawn from a dedicated stream.
class RidgeExpert {
public:
  RidgeExpert(ArExpertSpec spec, RidgeModel model, Rng rng)
      : spec_(std::move(spec)), model_(std::move(model)), rng_(rng) {}
  double predict(const std::vector<double> &series, size_t index) {
    double p = model_.predict(lag_vector(series, index, spec_.lags));
    if (spec_.noise_std > 0.0) p += spec_.noise_std * noise_(rng_);
    return p;
  }
  const RidgeModel &model() const { return model_; }
  const ArExpertSpec &spec() const { return spec_; }

private:
  ArExpertSpec spec_;
  RidgeModel model_;
  Rng rng_;
  std::normal_distribution<double> noise_{0.0, 1.0};
};

inline RidgeExpert fit_ridge_expert(const std::vector<double> &history, const ArExpertSpec &spec, Rng rng) {
  return RidgeExpert(spec, fit_ridge_ar(history, spec.lags, spec.lambda, 0, history.size() - 1), rng);
}

// ---------------------------------------------------------------------------
// Melbourne daily minimum temperatures

struct MelbourneConfig {
  std::string csv_path = "data/daily-min-temperatures.csv";
  std::vector<int> context_lags{1, 7, 30, 365};
  int zscore_window = 730;
  double zscore_eps = 1e-6;
  std::vector<ArExpertSpec> experts{
      {{1}, 1.0, 0.0}, {{1, 2}, 10.0, 0.0}, {{1, 7, 30, 365}, 1.0, 0.06}, {{1, 7, 30, 365}, 100.0, 0.10},
      {{1, 7, 30, 365}, 1000.0, 0.06}};
  std::vector<UnavailabilityWindow> unavailable{{2, 800, 1200}, {3, 500, 1500}};
  int max_rounds = 0; // 0 = full series
};

/// Trailing z-score over at most `window` rows ending at (and including) row i.
inline Mat rolling_zscore(const Mat &raw, int window, double eps) {
  Mat out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const Eigen::Index a = std::max<Eigen::Index>(0, i - window + 1);
    const Mat blk = raw.middleRows(a, i - a + 1);
    const Eigen::RowVectorXd mean = blk.colwise().mean();
    const Eigen::RowVectorXd sd = ((blk.rowwise() - mean).array().square().colwise().sum() /
                                   static_cast<double>(blk.rows()))
                                      .sqrt();
    out.row(i) = (raw.row(i) - mean).array() / (sd.array() + eps);
  }
  return out;
}

inline Environment melbourne_stream(const MelbourneConfig &cfg, std::uint64_t seed, int *repaired = nullptr) {
  const SeriesLoad load = read_dated_series(cfg.csv_path);
  if (repaired != nullptr) *repaired = load.repaired;
  std::vector<double> y;
  for (const auto &r : load.rows) y.push_back(r.value);
  const size_t ml = static_cast<size_t>(max_lag(cfg.context_lags));
  if (y.size() <= ml) throw ConfigError("melbourne: series shorter than the largest lag");

  std::vector<RidgeExpert> experts;
  for (size_t k = 0; k < cfg.experts.size(); ++k) {
    experts.push_back(fit_ridge_expert(y, cfg.experts[k], derive_rng(seed, "melbourne-expert", k)));
  }
  size_t last = y.size() - 1;
  if (cfg.max_rounds > 0) last = std::min(last, ml + static_cast<size_t>(cfg.max_rounds) - 1);
  const auto n = static_cast<Eigen::Index>(last - ml + 1);
  const int dim = static_cast<int>(cfg.context_lags.size()) + 4;
  Mat raw(n, dim);
  for (size_t i = ml; i <= last; ++i) {
    Vec row(dim);
    row << lag_vector(y, i, cfg.context_lags), calendar_features(load.rows[i].date);
    raw.row(static_cast<Eigen::Index>(i - ml)) = row.transpose();
  }
  const Mat ctx = rolling_zscore(raw, cfg.zscore_window, cfg.zscore_eps);

  Environment env;
  env.name = "melbourne";
  env.num_experts = static_cast<int>(experts.size());
  env.context_dim = dim;
  for (size_t i = ml; i <= last; ++i) {
    Round r;
    r.t = static_cast<int>(i) + 1; // 1-based series index
    r.x = ctx.row(static_cast<Eigen::Index>(i - ml)).transpose();
    r.available = available_at(r.t, env.num_experts, cfg.unavailable);
    r.target = Vec::Constant(1, y[i]);
    for (auto &e : experts) r.predictions.push_back(Vec::Constant(1, e.predict(y, i)));
    env.rounds.push_back(std::move(r));
  }
  return env;
}

// ---------------------------------------------------------------------------
// FRED DGS10

struct DateRange {
  std::chrono::year_month_day first, last;
};

struct FredConfig {
  std::string csv_path = "data/DGS10.csv";
  std::vector<int> context_lags{1, 5, 20, 60, 120, 250};
  int zscore_rows = 2520;
  double zscore_eps = 1e-6;
  double ridge_lambda = 1.0;
  std::vector<DateRange> training_windows{
      {std::chrono::year{1990} / 1 / 2, std::chrono::year{2000} / 12 / 31},
      {std::chrono::year{2001} / 1 / 1, std::chrono::year{2007} / 12 / 31},
      {std::chrono::year{2008} / 1 / 1, std::chrono::year{2015} / 12 / 31},
      {std::chrono::year{2016} / 1 / 1, std::chrono::year{2023} / 12 / 31}};
  int max_rounds = 0;
};

inline Environment fred_stream(const FredConfig &cfg, int *repaired = nullptr) {
  const SeriesLoad load = read_dated_series(cfg.csv_path);
  if (repaired != nullptr) *repaired = load.repaired;
  std::vector<double> y;
  for (const auto &r : load.rows) y.push_back(r.value);
  const size_t ml = static_cast<size_t>(max_lag(cfg.context_lags));
  if (y.size() <= ml) throw ConfigError("fred: series shorter than the largest lag");
  size_t last = y.size() - 1;
  if (cfg.max_rounds > 0) last = std::min(last, ml + static_cast<size_t>(cfg.max_rounds) - 1);
  const auto n = static_cast<Eigen::Index>(last - ml + 1);
  const int dim = static_cast<int>(cfg.context_lags.size()) + 4;
  Mat raw(n, dim);
  for (size_t i = ml; i <= last; ++i) {
    Vec row(dim);
    row << lag_vector(y, i, cfg.context_lags), calendar_features(load.rows[i].date);
    raw.row(static_cast<Eigen::Index>(i - ml)) = row.transpose();
  }
  const Eigen::Index nz = std::min<Eigen::Index>(n, cfg.zscore_rows);
  const Eigen::RowVectorXd mean = raw.topRows(nz).colwise().mean();
  const Eigen::RowVectorXd sd =
      ((raw.topRows(nz).rowwise() - mean).array().square().colwise().sum() / static_cast<double>(nz)).sqrt();
  const Mat ctx = (raw.rowwise() - mean).array().rowwise() / (sd.array() + cfg.zscore_eps);

  std::vector<RidgeModel> experts;
  for (const auto &w : cfg.training_windows) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto &d = load.rows[static_cast<size_t>(i) + ml].date;
      if (d >= w.first && d <= w.last) rows.push_back(i);
    }
    if (rows.size() < 2) throw ConfigError("fred: expert training window has fewer than 2 rows");
    Mat x(static_cast<Eigen::Index>(rows.size()), dim);
    Vec t(static_cast<Eigen::Index>(rows.size()));
    for (size_t j = 0; j < rows.size(); ++j) {
      x.row(static_cast<Eigen::Index>(j)) = ctx.row(rows[j]);
      t(static_cast<Eigen::Index>(j)) = y[static_cast<size_t>(rows[j]) + ml];
    }
    experts.push_back(fit_ridge(x, t, cfg.ridge_lambda));
  }

  Environment env;
  env.name = "fred";
  env.num_experts = static_cast<int>(experts.size());
  env.context_dim = dim;
  for (Eigen::Index i = 0; i < n; ++i) {
    Round r;
    r.t = static_cast<int>(i) + 1;
    r.x = ctx.row(i).transpose();
    for (ExpertId k = 0; k < env.num_experts; ++k) r.available.push_back(k);
    r.target = Vec::Constant(1, y[static_cast<size_t>(i) + ml]);
    for (const auto &e : experts) r.predictions.push_back(Vec::Constant(1, e.predict(r.x)));
    env.rounds.push_back(std::move(r));
  }
  return env;
}

} // namespace l2d
