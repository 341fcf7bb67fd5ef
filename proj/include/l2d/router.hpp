#pragma once

#include "l2d/common.hpp"
#include "l2d/imm_filter.hpp"
#include "l2d/linalg.hpp"
#include "l2d/model_core.hpp"
#include "l2d/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

namespace l2d {

struct RouterConfig {
  double eps_ig = 1e-10;
  int ig_samples = 50;
  double gap_offset = 0.0; // δ
};

struct ExpertScore {
  ExpertId expert = 0;
  double predicted_cost = 0.0;
  double gap = 0.0;
  double ig_mode = 0.0;
  double ig_factor = 0.0;
  double ig_total = 0.0;
  double ratio = 0.0;
};

struct RoutingScores {
  std::vector<ExpertScore> experts; // ordered by expert id
  ExpertId chosen = -1;
  ExpertId myopic = -1; // k^pred
};

namespace router {

inline std::map<ExpertId, double> predicted_costs(const FilterState &state, const Mat &phi,
                                                  const ExpertSet &available) {
  std::map<ExpertId, double> out;
  for (ExpertId k : available) {
    out[k] = expected_cost_mixture(state.weights, imm::predictive_moments(state, phi, k), state.expert(k).fee);
  }
  return out;
}

inline std::map<ExpertId, double> gaps(const std::map<ExpertId, double> &costs) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto &[_, c] : costs) best = std::min(best, c);
  std::map<ExpertId, double> out;
  for (const auto &[k, c] : costs) out[k] = c - best;
  return out;
}

/// Σ_m w_m ½ log det(I + H_m Σ_{g,m} H_mᵀ S_m⁻¹).
inline double ig_shared_factor(const Vec &weights, const std::vector<Mat> &h, const std::vector<Mat> &sigma_g,
                               const std::vector<Mat> &s_channel) {
  double ig = 0.0;
  for (size_t m = 0; m < h.size(); ++m) {
    const double w = weights(static_cast<Eigen::Index>(m));
    if (w <= 0.0 || h[m].cols() == 0) {
      continue;
    }
    const Mat signal = h[m] * sigma_g[m] * h[m].transpose();
    Eigen::LLT<Mat> llt(s_channel[m]);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("ig_shared_factor: channel covariance is not positive definite");
    }
    // det(I + P S⁻¹) = det(S + P) / det(S)
    const double v = 0.5 * (linalg::log_det_spd(s_channel[m] + signal) - linalg::log_det_spd(s_channel[m]));
    ig += w * std::max(v, 0.0);
  }
  return ig;
}

inline double ig_shared_factor(const FilterState &state, const Mat &phi, ExpertId k) {
  const ExpertState &ex = state.expert(k);
  const int M = state.num_regimes();
  std::vector<Mat> h(M), sg(M), sc(M);
  for (int m = 0; m < M; ++m) {
    h[m] = phi.transpose() * ex.loading;
    sg[m] = state.g[m].cov;
    sc[m] = phi.transpose() * ex.u[m].cov * phi + ex.noise[m];
  }
  return ig_shared_factor(state.weights, h, sg, sc);
}

/// Monte-Carlo estimate of the mutual information between z and the
/// hypothetical residual: Σ_m w_m (1/S) Σ_s [log p_m(E) − log p_mix(E)], E ~ p_m.
template <class Rng>
double ig_mode_identification(const Vec &weights, const std::vector<EmissionMoments> &moments, int samples,
                              Rng &rng) {
  const auto M = static_cast<Eigen::Index>(moments.size());
  if (M <= 1) {
    return 0.0;
  }
  if (samples < 1) {
    throw ConfigError("ig_mode_identification: sample count must be >= 1");
  }
  std::vector<Eigen::LLT<Mat>> chol;
  std::vector<double> log_norm;
  for (const auto &mo : moments) {
    chol.emplace_back(mo.cov);
    if (chol.back().info() != Eigen::Success) {
      throw NumericalError("ig_mode_identification: predictive covariance is not positive definite");
    }
    const Mat l = chol.back().matrixL();
    log_norm.push_back(-0.5 * static_cast<double>(mo.mean.size()) * std::log(2.0 * std::numbers::pi) -
                       l.diagonal().array().log().sum());
  }
  const Vec log_w = weights.array().max(std::numeric_limits<double>::min()).log().matrix();
  auto log_p = [&](Eigen::Index l, const Vec &e) {
    const Vec white = chol[l].matrixL().solve(e - moments[l].mean);
    return log_norm[l] - 0.5 * white.squaredNorm();
  };
  double total = 0.0;
  Vec terms(M);
  for (Eigen::Index m = 0; m < M; ++m) {
    if (weights(m) <= 0.0) {
      continue;
    }
    const Mat l = chol[m].matrixL();
    double acc = 0.0;
    for (int s = 0; s < samples; ++s) {
      const Vec e = moments[m].mean + l * linalg::standard_normal(moments[m].mean.size(), rng);
      for (Eigen::Index j = 0; j < M; ++j) terms(j) = log_w(j) + log_p(j, e);
      acc += (terms(m) - log_w(m)) - linalg::log_sum_exp(terms);
    }
    total += weights(m) * acc / samples;
  }
  return std::max(total, 0.0);
}

/// argmin_k (Δ_k + δ)² / IG_k; ties → higher IG, then lower id.
inline ExpertId select_ids(std::vector<ExpertScore> &scores, double eps_ig, double gap_offset) {
  if (scores.empty()) {
    throw ProtocolError("select_ids: no candidate experts");
  }
  for (auto &s : scores) {
    s.ig_total = std::max(s.ig_total, eps_ig);
    const double d = s.gap + gap_offset;
    s.ratio = d * d / s.ig_total;
  }
  const ExpertScore *best = &scores.front();
  for (const auto &s : scores) {
    if (s.ratio < best->ratio ||
        (s.ratio == best->ratio &&
         (s.ig_total > best->ig_total || (s.ig_total == best->ig_total && s.expert < best->expert)))) {
      best = &s;
    }
  }
  return best->expert;
}

/// Score every available expert at the predictive state and pick one.
template <class Rng>
RoutingScores route(const FilterState &state, const Mat &phi, const ExpertSet &available, const RouterConfig &cfg,
                    Rng &rng) {
  ExpertSet avail = available;
  std::sort(avail.begin(), avail.end());
  RoutingScores out;
  const auto costs = predicted_costs(state, phi, avail);
  const auto gp = gaps(costs);
  double best = std::numeric_limits<double>::infinity();
  for (ExpertId k : avail) {
    ExpertScore s;
    s.expert = k;
    s.predicted_cost = costs.at(k);
    s.gap = gp.at(k);
    s.ig_factor = ig_shared_factor(state, phi, k);
    s.ig_mode = ig_mode_identification(state.weights, imm::predictive_moments(state, phi, k), cfg.ig_samples, rng);
    s.ig_total = s.ig_mode + s.ig_factor;
    if (s.predicted_cost < best) {
      best = s.predicted_cost;
      out.myopic = k;
    }
    out.experts.push_back(s);
  }
  out.chosen = select_ids(out.experts, cfg.eps_ig, cfg.gap_offset);
  return out;
}

} // namespace router
} // namespace l2d
