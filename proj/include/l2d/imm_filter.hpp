#pragma once

#include "l2d/common.hpp"
#include "l2d/linalg.hpp"
#include "l2d/model_core.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace l2d {

struct ExpertState {
  std::vector<GaussianBelief> u; // per regime
  Mat loading;
  std::vector<Mat> noise; // R[m], per regime
  double fee = 0.0;
  int tau_last = 0;
};

struct FilterState {
  Vec weights;                // w_t (posterior after correct) or w̄_t (predictive)
  std::vector<GaussianBelief> g; // per regime
  std::map<ExpertId, ExpertState> registry;
  int t = 0;

  int num_regimes() const { return static_cast<int>(weights.size()); }

  const ExpertState &expert(ExpertId k) const {
    auto it = registry.find(k);
    if (it == registry.end()) {
      throw RegistryError("expert " + std::to_string(k) + " is not registered");
    }
    return it->second;
  }
  ExpertState &expert(ExpertId k) {
    auto it = registry.find(k);
    if (it == registry.end()) {
      throw RegistryError("expert " + std::to_string(k) + " is not registered");
    }
    return it->second;
  }
};

struct FilterConfig {
  double eps_w = 1e-6;
  bool joseph_form = false;
};

struct RegimePrediction {
  Vec weights; // w̄, floored and renormalized
  Mat mixing;  // mixing(ℓ, m) = w_{ℓ|m}; each column sums to 1
};

namespace imm {

/// Floor every entry at eps and renormalize.
inline Vec floor_and_normalize(Vec w, double eps) {
  w = w.cwiseMax(eps);
  return w / w.sum();
}

inline RegimePrediction predict_regime_weights(const Vec &w_prev, const Mat &pi, double eps_w) {
  const Eigen::Index M = w_prev.size();
  if (pi.rows() != M || pi.cols() != M) {
    throw ConfigError("predict_regime_weights: transition matrix shape mismatch");
  }
  RegimePrediction out;
  const Vec mass = pi.transpose() * w_prev; // pre-floor predictive mass c_m
  out.mixing.resize(M, M);
  for (Eigen::Index m = 0; m < M; ++m) {
    if (mass(m) > 1e-300) {
      out.mixing.col(m) = w_prev.cwiseProduct(pi.col(m)) / mass(m);
    } else {
      out.mixing.col(m) = w_prev / w_prev.sum();
    }
  }
  out.weights = floor_and_normalize(mass, eps_w);
  return out;
}

/// Moment-matched IMM mixture for every target regime m.
inline std::vector<GaussianBelief> mix_beliefs(const std::vector<GaussianBelief> &beliefs, const Mat &mixing) {
  const auto M = static_cast<Eigen::Index>(beliefs.size());
  std::vector<GaussianBelief> out(beliefs.size());
  if (M == 0) {
    return out;
  }
  const Eigen::Index d = beliefs.front().dim();
  for (Eigen::Index m = 0; m < M; ++m) {
    Vec mean = Vec::Zero(d);
    for (Eigen::Index l = 0; l < M; ++l) {
      mean += mixing(l, m) * beliefs[l].mean;
    }
    Mat cov = Mat::Zero(d, d);
    for (Eigen::Index l = 0; l < M; ++l) {
      const Vec diff = beliefs[l].mean - mean;
      cov += mixing(l, m) * (beliefs[l].cov + diff * diff.transpose());
    }
    linalg::ensure_psd(cov);
    out[m] = {std::move(mean), std::move(cov)};
  }
  return out;
}

inline GaussianBelief time_update(const GaussianBelief &b, const Mat &a, const Mat &q) {
  GaussianBelief out{a * b.mean, a * b.cov * a.transpose() + q};
  linalg::ensure_psd(out.cov);
  return out;
}

/// Pre-projection Kalman update of the stacked state s = (g, u_k).
struct JointUpdate {
  Vec mean;     // posterior mean of (g, u_k)
  Mat cov;      // full posterior covariance (cross block retained)
  Vec innovation;
  Mat innovation_cov; // S
  double log_likelihood = 0.0;
};

inline JointUpdate joint_update(const GaussianBelief &g, const GaussianBelief &u, const Mat &phi,
                                const Mat &loading, const Mat &noise, const Vec &residual,
                                bool joseph_form = false) {
  const Eigen::Index dg = g.dim(), du = u.dim(), dy = phi.cols();
  const Eigen::Index n = dg + du;
  Vec mean(n);
  mean << g.mean, u.mean;
  Mat cov = Mat::Zero(n, n);
  cov.topLeftCorner(dg, dg) = g.cov;
  cov.bottomRightCorner(du, du) = u.cov;
  Mat h(dy, n);
  h << phi.transpose() * loading, phi.transpose();

  JointUpdate out;
  out.innovation = residual - h * mean;
  out.innovation_cov = h * cov * h.transpose() + noise;
  linalg::symmetrize(out.innovation_cov);
  Eigen::LLT<Mat> llt(out.innovation_cov);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("correct: innovation covariance is not positive definite");
  }
  const Mat gain = llt.solve(h * cov).transpose(); // Σ Hᵀ S⁻¹
  out.mean = mean + gain * out.innovation;
  if (joseph_form) {
    const Mat ikh = Mat::Identity(n, n) - gain * h;
    out.cov = ikh * cov * ikh.transpose() + gain * noise * gain.transpose();
  } else {
    out.cov = cov - gain * out.innovation_cov * gain.transpose();
  }
  linalg::ensure_psd(out.cov);
  out.log_likelihood = linalg::gaussian_logpdf(residual, h * mean, out.innovation_cov);
  return out;
}

/// Test oracle: the exact joint posterior of (g, u_k) including the cross block.
inline GaussianBelief exact_joint_correct(const GaussianBelief &g, const GaussianBelief &u, const Mat &phi,
                                          const Mat &loading, const Mat &noise, const Vec &residual) {
  JointUpdate j = joint_update(g, u, phi, loading, noise, residual, false);
  return {std::move(j.mean), std::move(j.cov)};
}

/// Queried update for the predictive state at round state.t. Replaces g and
/// u_k beliefs by the diagonal blocks of the joint posterior, reweights the
/// regimes and stamps tau_last. Returns the per-mode log-likelihoods.
inline Vec correct_queried(FilterState &state, const Mat &phi, ExpertId k, const Vec &residual,
                           const FilterConfig &cfg) {
  ExpertState &ex = state.expert(k);
  const int M = state.num_regimes();
  Vec loglik(M);
  for (int m = 0; m < M; ++m) {
    const GaussianBelief &g = state.g[m];
    GaussianBelief &u = ex.u[m];
    JointUpdate j = joint_update(g, u, phi, ex.loading, ex.noise[m], residual, cfg.joseph_form);
    const Eigen::Index dg = g.dim(), du = u.dim();
    GaussianBelief g_post{j.mean.head(dg), j.cov.topLeftCorner(dg, dg)};
    GaussianBelief u_post{j.mean.tail(du), j.cov.bottomRightCorner(du, du)};
    linalg::symmetrize(g_post.cov);
    linalg::symmetrize(u_post.cov);
    state.g[m] = std::move(g_post);
    u = std::move(u_post);
    loglik(m) = j.log_likelihood;
  }
  Vec logw = loglik + state.weights.array().log().matrix();
  const double lse = linalg::log_sum_exp(logw);
  if (!std::isfinite(lse)) {
    throw NumericalError("correct: non-finite mode log-likelihoods at round " + std::to_string(state.t));
  }
  state.weights = floor_and_normalize((logw.array() - lse).exp().matrix(), cfg.eps_w);
  ex.tau_last = state.t;
  return loglik;
}

/// Cross-covariance of α_j = B_j g + u_j and α_k = B_k g + u_k under the
/// factorized regime-m belief (u_j, u_k independent of g and each other).
inline Mat reliability_cross_covariance(const FilterState &state, int m, ExpertId j, ExpertId k) {
  const ExpertState &ej = state.expert(j);
  const ExpertState &ek = state.expert(k);
  Mat c = ej.loading * state.g[m].cov * ek.loading.transpose();
  if (j == k) {
    c += ej.u[m].cov;
  }
  return c;
}

/// Mode-conditioned predictive residual moments of expert k at the current state.
inline EmissionMoments predictive_moments(const FilterState &state, const Mat &phi, int m, ExpertId k) {
  const ExpertState &ex = state.expert(k);
  return emission_moments(phi, ex.loading, state.g[m], ex.u[m], ex.noise[m]);
}

inline std::vector<EmissionMoments> predictive_moments(const FilterState &state, const Mat &phi, ExpertId k) {
  std::vector<EmissionMoments> out;
  out.reserve(state.g.size());
  for (int m = 0; m < state.num_regimes(); ++m) {
    out.push_back(predictive_moments(state, phi, m, k));
  }
  return out;
}

/// Mixture mean Σ_m w_m ē_m of the predictive residual of expert k.
inline Vec predictive_residual_mean(const FilterState &state, const Mat &phi, ExpertId k) {
  Vec mean = Vec::Zero(phi.cols());
  for (int m = 0; m < state.num_regimes(); ++m) {
    mean += state.weights(m) * predictive_moments(state, phi, m, k).mean;
  }
  return mean;
}

} // namespace imm
} // namespace l2d
