#pragma once

#include "l2d/common.hpp"
#include "l2d/imm_filter.hpp"
#include "l2d/linalg.hpp"
#include "l2d/model_core.hpp"
#include "l2d/registry.hpp"
#include "l2d/rng.hpp"
#include "l2d/transitions.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace l2d {

struct EmConfig {
  int n_em = 10;
  int n_samp = 200;
  int n_burn = 50;
  double eps_n = 1.0;
  double lambda_theta = 1e-3;
  double lambda_b = 1e-3;
  int window = 500;
  int period = 250;
  int n_em_window = 3;
  int theta_steps = 200;
  double theta_step = 1e-2;
  double cov_floor = 1e-8;
  bool learn_transitions = true;
  bool learn_dynamics = true;
  bool learn_emission = true;

  void validate() const {
    if (n_em < 0 || n_samp < 1 || n_burn < 0 || n_samp <= n_burn) {
      throw ConfigError("em: need n_em >= 0 and n_samp > n_burn >= 0");
    }
    if (window < 2 || period < 1 || n_em_window < 0) {
      throw ConfigError("em: need window >= 2, period >= 1, n_em_window >= 0");
    }
    if (eps_n <= 0.0 || lambda_theta < 0.0 || lambda_b < 0.0) {
      throw ConfigError("em: eps_n must be > 0 and ridge weights >= 0");
    }
  }
};

/// One logged interaction round as seen by the learner.
struct WindowRound {
  int t = 0;
  Vec x;
  Mat phi;
  ExpertId queried = 0;
  Vec residual;
};

/// Predictive priors at the first window round t_a: p(z_{t_a}) and the
/// regime-conditioned Gaussian beliefs of g_{t_a} and u_{t_a,k}.
struct WindowPrior {
  Vec z;
  std::vector<GaussianBelief> g;
  std::map<ExpertId, std::vector<GaussianBelief>> u;
};

/// One joint draw of the latent paths over the window (column τ ↔ round τ).
struct LatentPaths {
  std::vector<int> z;
  Mat g;                          // d_g × T
  std::map<ExpertId, Mat> u;      // d_alpha × T
};

struct EmissionDraw {
  ExpertId expert = 0;
  int regime = 0;
  Vec y; // e_t − Φᵀu_{t,k}
  Mat x; // gᵀ ⊗ Φᵀ  (d_y × d_g·d_alpha)
  Vec residual; // e_t
  Mat phi;
  Vec u;
};

struct PosteriorStats {
  int num_samples = 0;
  std::vector<Vec> gamma; // [τ] length M
  std::vector<Mat> xi;    // [τ−1] for τ ≥ 1, M×M
  // per regime, over interior rounds
  Vec n_g, n_u;
  std::vector<Mat> s_gg, s_ggm, s_gmgm;
  std::vector<Mat> s_uu, s_uum, s_umum;
  std::vector<EmissionDraw> emission; // every post-burn-in (sample, queried round)
};

struct EmTrace {
  std::vector<double> objective;     // surrogate per iteration
  std::vector<double> objective_se;  // batch-means standard error
  std::vector<Vec> occupancy;        // N_m per iteration
};

namespace learning {

inline ExpertSet queried_experts(const std::vector<WindowRound> &data) {
  std::set<ExpertId> s;
  for (const auto &r : data) s.insert(r.queried);
  return {s.begin(), s.end()};
}

/// Default window prior: p(z_1), g_0 and the birth prior, each propagated one step.
inline WindowPrior default_window_prior(const ModelParams &p, const ExpertSet &experts) {
  WindowPrior w;
  w.z = p.prior_z;
  for (int m = 0; m < p.num_regimes; ++m) {
    w.g.push_back(imm::time_update(p.prior_g[m], p.A_g[m], p.Q_g[m]));
  }
  for (ExpertId k : experts) {
    auto &v = w.u[k];
    for (int m = 0; m < p.num_regimes; ++m) {
      v.push_back(imm::time_update(p.birth_prior[m], p.A_u[m], p.Q_u[m]));
    }
  }
  return w;
}

/// Window prior from a stored filtering belief at t_a − 1 plus one IMM prediction step.
/// Experts absent from the stored registry receive the propagated birth prior.
inline WindowPrior window_prior_from_state(const FilterState &s, const ModelParams &p, const Vec &x_first,
                                           const ExpertSet &experts, double eps_w = 1e-6) {
  WindowPrior w;
  const Mat pi = transitions::transition_matrix(p.transition, x_first);
  const RegimePrediction pred = imm::predict_regime_weights(s.weights, pi, eps_w);
  w.z = pred.weights;
  const auto gm = imm::mix_beliefs(s.g, pred.mixing);
  for (int m = 0; m < p.num_regimes; ++m) {
    w.g.push_back(imm::time_update(gm[m], p.A_g[m], p.Q_g[m]));
  }
  for (ExpertId k : experts) {
    auto &v = w.u[k];
    if (auto it = s.registry.find(k); it != s.registry.end()) {
      const auto um = imm::mix_beliefs(it->second.u, pred.mixing);
      for (int m = 0; m < p.num_regimes; ++m) v.push_back(imm::time_update(um[m], p.A_u[m], p.Q_u[m]));
    } else {
      for (int m = 0; m < p.num_regimes; ++m) {
        v.push_back(imm::time_update(p.birth_prior[m], p.A_u[m], p.Q_u[m]));
      }
    }
  }
  return w;
}

/// Cached Gaussian log-density with fixed covariance.
class FixedGaussian {
public:
  FixedGaussian() = default;
  explicit FixedGaussian(const Mat &cov) {
    dim_ = cov.rows();
    if (dim_ == 0) {
      return;
    }
    Mat c = cov;
    linalg::ensure_psd(c);
    Eigen::LLT<Mat> llt(c);
    if (llt.info() != Eigen::Success) {
      linalg::floor_eigenvalues(c, 1e-12);
      llt.compute(c);
    }
    l_ = llt.matrixL();
    const double log_det = 2.0 * l_.diagonal().array().log().sum();
    log_norm_ = -0.5 * (static_cast<double>(dim_) * std::log(2.0 * std::numbers::pi) + log_det);
  }
  double logpdf(const Vec &diff) const {
    if (dim_ == 0) {
      return 0.0;
    }
    if (dim_ == 1) {
      const double w = diff(0) / l_(0, 0);
      return log_norm_ - 0.5 * w * w;
    }
    const Vec w = l_.triangularView<Eigen::Lower>().solve(diff);
    return log_norm_ - 0.5 * w.squaredNorm();
  }

private:
  Eigen::Index dim_ = 0;
  Mat l_;
  double log_norm_ = 0.0;
};

/// Per-E-step cache of everything that depends only on Θ and the data.
struct EStepCache {
  int T = 0, M = 0;
  std::vector<Mat> log_pi; // [τ] for τ ≥ 1
  std::vector<FixedGaussian> q_g, q_u;
  std::map<ExpertId, std::vector<FixedGaussian>> r;
  std::vector<FixedGaussian> prior_g;
  std::map<ExpertId, std::vector<FixedGaussian>> prior_u;
};

inline EStepCache build_cache(const std::vector<WindowRound> &data, const ModelParams &p, const WindowPrior &prior,
                              const ExpertSet &experts) {
  EStepCache c;
  c.T = static_cast<int>(data.size());
  c.M = p.num_regimes;
  c.log_pi.resize(data.size());
  for (int t = 1; t < c.T; ++t) {
    c.log_pi[t] = transitions::transition_matrix(p.transition, data[t].x).array().log().matrix();
  }
  for (int m = 0; m < c.M; ++m) {
    c.q_g.emplace_back(p.Q_g[m]);
    c.q_u.emplace_back(p.Q_u[m]);
    c.prior_g.emplace_back(prior.g[m].cov);
  }
  for (ExpertId k : experts) {
    const auto &ep = p.experts.at(k);
    for (int m = 0; m < c.M; ++m) {
      c.r[k].emplace_back(ep.noise[m]);
      c.prior_u[k].emplace_back(prior.u.at(k)[m].cov);
    }
  }
  return c;
}

/// Per-round, per-regime conditional log-likelihood of the current (g, u) draw.
inline Mat regime_log_likelihoods(const std::vector<WindowRound> &data, const LatentPaths &paths,
                                  const ModelParams &p, const WindowPrior &prior, const EStepCache &c) {
  const int T = c.T, M = c.M;
  Mat ll = Mat::Zero(T, M);
  const bool has_g = p.d_g > 0;
  for (int t = 0; t < T; ++t) {
    const auto &r = data[t];
    const auto &u_k = paths.u.at(r.queried);
    const Mat &b = p.experts.at(r.queried).loading;
    Vec alpha = u_k.col(t);
    if (has_g) alpha += b * paths.g.col(t);
    const Vec innov = r.residual - r.phi.transpose() * alpha;
    for (int m = 0; m < M; ++m) {
      double v = c.r.at(r.queried)[m].logpdf(innov);
      if (t == 0) {
        if (has_g) v += c.prior_g[m].logpdf(paths.g.col(0) - prior.g[m].mean);
        for (const auto &[k, u] : paths.u) v += c.prior_u.at(k)[m].logpdf(u.col(0) - prior.u.at(k)[m].mean);
      } else {
        if (has_g) v += c.q_g[m].logpdf(paths.g.col(t) - p.A_g[m] * paths.g.col(t - 1));
        for (const auto &[k, u] : paths.u) v += c.q_u[m].logpdf(u.col(t) - p.A_u[m] * u.col(t - 1));
      }
      ll(t, m) = v;
    }
  }
  return ll;
}

/// Forward log-messages log α_τ(m) of the discrete chain with log-likelihoods `ll`.
inline Mat forward_log_messages(const Vec &log_prior, const std::vector<Mat> &log_pi, const Mat &ll) {
  const Eigen::Index T = ll.rows(), M = ll.cols();
  Mat la(T, M);
  if (T == 0) {
    return la;
  }
  la.row(0) = log_prior.transpose() + ll.row(0);
  Vec tmp(M);
  for (Eigen::Index t = 1; t < T; ++t) {
    for (Eigen::Index m = 0; m < M; ++m) {
      for (Eigen::Index l = 0; l < M; ++l) tmp(l) = la(t - 1, l) + log_pi[t](l, m);
      la(t, m) = linalg::log_sum_exp(tmp) + ll(t, m);
    }
  }
  return la;
}

/// Normalized filtering marginals p(z_τ | obs_{≤τ}) from forward messages.
inline Mat filtering_marginals(const Mat &log_alpha) {
  Mat p(log_alpha.rows(), log_alpha.cols());
  for (Eigen::Index t = 0; t < log_alpha.rows(); ++t) {
    const Vec row = log_alpha.row(t).transpose();
    const double lse = linalg::log_sum_exp(row);
    if (!std::isfinite(lse)) {
      throw NumericalError("forward messages vanished at window position " + std::to_string(t));
    }
    p.row(t) = (row.array() - lse).exp().matrix().transpose();
  }
  return p;
}

template <class Rng> int sample_log_categorical(const Vec &logw, Rng &rng) {
  const double lse = linalg::log_sum_exp(logw);
  if (!std::isfinite(lse)) {
    throw NumericalError("categorical draw from vanishing weights");
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < logw.size(); ++i) {
    acc += std::exp(logw(i) - lse);
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(logw.size() - 1);
}

/// FFBS draw of z given per-round log-likelihoods.
template <class Rng>
std::vector<int> ffbs_discrete(const Vec &log_prior, const std::vector<Mat> &log_pi, const Mat &ll, Rng &rng) {
  const Eigen::Index T = ll.rows(), M = ll.cols();
  std::vector<int> z(static_cast<size_t>(T), 0);
  if (T == 0 || M == 1) {
    return z;
  }
  const Mat la = forward_log_messages(log_prior, log_pi, ll);
  z[T - 1] = sample_log_categorical(Vec(la.row(T - 1).transpose()), rng);
  Vec w(M);
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    for (Eigen::Index l = 0; l < M; ++l) w(l) = la(t, l) + log_pi[t + 1](l, z[t + 1]);
    z[t] = sample_log_categorical(w, rng);
  }
  return z;
}

template <class Rng>
std::vector<int> ffbs_regimes(const std::vector<WindowRound> &data, const LatentPaths &paths, const ModelParams &p,
                              const WindowPrior &prior, const EStepCache &c, Rng &rng) {
  const Mat ll = regime_log_likelihoods(data, paths, p, prior, c);
  const Vec log_prior = prior.z.array().max(1e-300).log().matrix();
  return ffbs_discrete(log_prior, c.log_pi, ll, rng);
}

/// Observation y = H x + v, v ~ N(0, R), for one position of a linear-Gaussian chain.
struct ChainObservation {
  bool present = false;
  Mat h;
  Vec y;
  Mat r;
};

/// Forward Kalman filter + backward sampling for x_0..x_{T−1} with
/// x_0 ~ init[z_0], x_τ = A[z_τ] x_{τ−1} + N(0, Q[z_τ]).
template <class Rng>
Mat ffbs_gaussian(const std::vector<GaussianBelief> &init, const std::vector<int> &z, const std::vector<Mat> &a,
                  const std::vector<Mat> &q, const std::vector<ChainObservation> &obs, Rng &rng) {
  const auto T = static_cast<Eigen::Index>(z.size());
  const Eigen::Index d = init.empty() ? 0 : init.front().dim();
  Mat path(d, T);
  if (d == 0 || T == 0) {
    return path;
  }
  std::vector<Vec> mf(T);
  std::vector<Mat> pf(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    Vec mp;
    Mat pp;
    if (t == 0) {
      mp = init[z[0]].mean;
      pp = init[z[0]].cov;
    } else {
      const Mat &at = a[z[t]];
      mp = at * mf[t - 1];
      pp = at * pf[t - 1] * at.transpose() + q[z[t]];
    }
    if (obs[t].present) {
      const Mat &h = obs[t].h;
      Mat s = h * pp * h.transpose() + obs[t].r;
      linalg::symmetrize(s);
      const Mat gain = linalg::solve_spd(s, h * pp).transpose();
      mf[t] = mp + gain * (obs[t].y - h * mp);
      pf[t] = pp - gain * s * gain.transpose();
    } else {
      mf[t] = std::move(mp);
      pf[t] = std::move(pp);
    }
    linalg::symmetrize(pf[t]);
  }
  path.col(T - 1) = linalg::sample_gaussian(mf[T - 1], pf[T - 1], rng);
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const Mat &an = a[z[t + 1]];
    Mat pp = an * pf[t] * an.transpose() + q[z[t + 1]];
    linalg::symmetrize(pp);
    const Mat j = linalg::solve_spd(pp, an * pf[t]).transpose(); // P Aᵀ (A P Aᵀ + Q)⁻¹
    const Vec mean = mf[t] + j * (path.col(t + 1) - an * mf[t]);
    Mat cov = pf[t] - j * an * pf[t];
    linalg::symmetrize(cov);
    path.col(t) = linalg::sample_gaussian(mean, cov, rng);
  }
  return path;
}

/// Draw g given z and the queried experts' u: e_τ − Φᵀu_{τ,I_τ} = ΦᵀB_{I_τ} g_τ + v_τ.
template <class Rng>
Mat smooth_global(const std::vector<WindowRound> &data, const std::vector<int> &z, const LatentPaths &paths,
                  const ModelParams &p, const WindowPrior &prior, Rng &rng) {
  if (p.d_g == 0) {
    return Mat(0, static_cast<Eigen::Index>(data.size()));
  }
  std::vector<ChainObservation> obs(data.size());
  for (size_t t = 0; t < data.size(); ++t) {
    const auto &r = data[t];
    const auto &ep = p.experts.at(r.queried);
    auto &o = obs[t];
    o.present = true;
    o.h = r.phi.transpose() * ep.loading;
    o.y = r.residual - r.phi.transpose() * paths.u.at(r.queried).col(static_cast<Eigen::Index>(t));
    o.r = ep.noise[z[t]];
  }
  return ffbs_gaussian(prior.g, z, p.A_g, p.Q_g, obs, rng);
}

/// Draw u_{·,k} using only rounds where k was queried: e_τ − ΦᵀB_k g_τ = Φᵀu_{τ,k} + v_τ.
template <class Rng>
Mat smooth_idiosyncratic(const std::vector<WindowRound> &data, const std::vector<int> &z, const Mat &g,
                         const ModelParams &p, const WindowPrior &prior, ExpertId k, Rng &rng) {
  const auto &ep = p.experts.at(k);
  std::vector<ChainObservation> obs(data.size());
  for (size_t t = 0; t < data.size(); ++t) {
    const auto &r = data[t];
    if (r.queried != k) continue;
    auto &o = obs[t];
    o.present = true;
    o.h = r.phi.transpose();
    o.y = r.residual;
    if (p.d_g > 0) o.y -= r.phi.transpose() * ep.loading * g.col(static_cast<Eigen::Index>(t));
    o.r = ep.noise[z[t]];
  }
  return ffbs_gaussian(prior.u.at(k), z, p.A_u, p.Q_u, obs, rng);
}

/// Initial Gibbs state: z from the prior chain, zero g and u paths.
template <class Rng>
LatentPaths initial_paths(const std::vector<WindowRound> &data, const ModelParams &p, const WindowPrior &prior,
                          const ExpertSet &experts, const EStepCache &c, Rng &rng) {
  LatentPaths s;
  const auto T = static_cast<Eigen::Index>(data.size());
  s.z.assign(data.size(), 0);
  if (p.num_regimes > 1 && T > 0) {
    s.z[0] = sample_log_categorical(Vec(prior.z.array().max(1e-300).log().matrix()), rng);
    for (Eigen::Index t = 1; t < T; ++t) {
      s.z[t] = sample_log_categorical(Vec(c.log_pi[t].row(s.z[t - 1]).transpose()), rng);
    }
  }
  s.g = Mat::Zero(p.d_g, T);
  for (ExpertId k : experts) s.u[k] = Mat::Zero(p.d_alpha, T);
  return s;
}

/// Kronecker design X = gᵀ ⊗ Φᵀ, so that ΦᵀBg = X vec(B) with column-stacked vec.
inline Mat kron_design(const Vec &g, const Mat &phi) {
  const Eigen::Index dy = phi.cols(), da = phi.rows(), dg = g.size();
  Mat x(dy, dg * da);
  for (Eigen::Index j = 0; j < dg; ++j) {
    x.block(0, j * da, dy, da) = g(j) * phi.transpose();
  }
  return x;
}

inline PosteriorStats empty_stats(int T, const ModelParams &p) {
  PosteriorStats s;
  const int M = p.num_regimes;
  s.gamma.assign(T, Vec::Zero(M));
  s.xi.assign(T > 0 ? T - 1 : 0, Mat::Zero(M, M));
  s.n_g = Vec::Zero(M);
  s.n_u = Vec::Zero(M);
  s.s_gg.assign(M, Mat::Zero(p.d_g, p.d_g));
  s.s_ggm = s.s_gg;
  s.s_gmgm = s.s_gg;
  s.s_uu.assign(M, Mat::Zero(p.d_alpha, p.d_alpha));
  s.s_uum = s.s_uu;
  s.s_umum = s.s_uu;
  return s;
}

/// Add one post-burn-in draw to the running sums.
inline void accumulate(PosteriorStats &s, const std::vector<WindowRound> &data, const LatentPaths &paths,
                       const ModelParams &p) {
  const auto T = static_cast<Eigen::Index>(data.size());
  ++s.num_samples;
  for (Eigen::Index t = 0; t < T; ++t) {
    const int m = paths.z[t];
    s.gamma[t](m) += 1.0;
    if (t >= 1) {
      s.xi[t - 1](paths.z[t - 1], m) += 1.0;
      if (p.d_g > 0) {
        const auto g = paths.g.col(t), gm = paths.g.col(t - 1);
        s.s_gg[m] += g * g.transpose();
        s.s_ggm[m] += g * gm.transpose();
        s.s_gmgm[m] += gm * gm.transpose();
      }
      s.n_g(m) += 1.0;
      for (const auto &[k, u] : paths.u) {
        const auto cu = u.col(t), um = u.col(t - 1);
        s.s_uu[m] += cu * cu.transpose();
        s.s_uum[m] += cu * um.transpose();
        s.s_umum[m] += um * um.transpose();
        s.n_u(m) += 1.0;
      }
    }
    const auto &r = data[t];
    EmissionDraw e;
    e.expert = r.queried;
    e.regime = m;
    e.u = paths.u.at(r.queried).col(t);
    e.y = r.residual - r.phi.transpose() * e.u;
    e.x = kron_design(paths.g.col(t), r.phi);
    e.residual = r.residual;
    e.phi = r.phi;
    s.emission.push_back(std::move(e));
  }
}

/// Divide accumulated sums by the number of draws (turning them into ⟨·⟩ averages).
inline void finalize(PosteriorStats &s) {
  if (s.num_samples == 0) return;
  const double inv = 1.0 / s.num_samples;
  for (auto &v : s.gamma) v *= inv;
  for (auto &v : s.xi) v *= inv;
  s.n_g *= inv;
  s.n_u *= inv;
  for (auto *v : {&s.s_gg, &s.s_ggm, &s.s_gmgm, &s.s_uu, &s.s_uum, &s.s_umum}) {
    for (auto &m : *v) m *= inv;
  }
}

/// A ← S_{xx⁻}(S_{x⁻x⁻})⁻¹, Q ← averaged residual outer product; skipped when n ≤ eps_n.
inline bool mstep_linear_dynamics(Mat &a, Mat &q, const Mat &s_xx, const Mat &s_xxm, const Mat &s_xmxm, double n,
                                  double eps_n, double cov_floor) {
  if (n <= eps_n || a.size() == 0) {
    return false;
  }
  Eigen::LDLT<Mat> ldlt(s_xmxm);
  Mat a_new;
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() &&
      ldlt.vectorD().minCoeff() > 1e-12 * std::max(1.0, s_xmxm.diagonal().maxCoeff())) {
    a_new = ldlt.solve(s_xxm.transpose()).transpose();
  } else {
    const Mat reg = s_xmxm + 1e-8 * Mat::Identity(s_xmxm.rows(), s_xmxm.cols());
    a_new = reg.ldlt().solve(s_xxm.transpose()).transpose();
  }
  Mat q_new = (s_xx - a_new * s_xxm.transpose() - s_xxm * a_new.transpose() + a_new * s_xmxm * a_new.transpose()) / n;
  linalg::floor_eigenvalues(q_new, cov_floor);
  a = std::move(a_new);
  q = std::move(q_new);
  return true;
}

inline void mstep_dynamics(const PosteriorStats &s, ModelParams &p, double eps_n, double cov_floor = 1e-8) {
  for (int m = 0; m < p.num_regimes; ++m) {
    if (p.d_g > 0) {
      mstep_linear_dynamics(p.A_g[m], p.Q_g[m], s.s_gg[m], s.s_ggm[m], s.s_gmgm[m], s.n_g(m), eps_n, cov_floor);
    }
    mstep_linear_dynamics(p.A_u[m], p.Q_u[m], s.s_uu[m], s.s_uum[m], s.s_umum[m], s.n_u(m), eps_n, cov_floor);
  }
}

/// Ridge GLS for vec(B_k), then weighted covariance matching for R_{m,k}, for every queried expert.
inline void mstep_emission(const PosteriorStats &s, ModelParams &p, double eps_n, double lambda_b,
                           double cov_floor = 1e-8) {
  if (s.num_samples == 0) return;
  const double inv = 1.0 / s.num_samples;
  std::set<ExpertId> experts;
  for (const auto &e : s.emission) experts.insert(e.expert);
  const Eigen::Index nb = static_cast<Eigen::Index>(p.d_g) * p.d_alpha;
  for (ExpertId k : experts) {
    auto &ep = p.experts.at(k);
    if (nb > 0) {
      std::vector<Mat> r_inv;
      for (int m = 0; m < p.num_regimes; ++m) {
        r_inv.push_back(linalg::solve_spd(ep.noise[m], Mat::Identity(p.d_y, p.d_y)));
      }
      Mat lhs = Mat::Zero(nb, nb);
      Vec rhs = Vec::Zero(nb);
      for (const auto &e : s.emission) {
        if (e.expert != k) continue;
        const Mat xr = e.x.transpose() * r_inv[e.regime];
        lhs += xr * e.x;
        rhs += xr * e.y;
      }
      lhs *= inv;
      rhs *= inv;
      lhs += lambda_b * Mat::Identity(nb, nb);
      const Vec b = linalg::solve_spd(lhs, rhs);
      ep.loading = Eigen::Map<const Mat>(b.data(), p.d_alpha, p.d_g);
    }
    for (int m = 0; m < p.num_regimes; ++m) {
      double n = 0.0;
      Mat acc = Mat::Zero(p.d_y, p.d_y);
      for (const auto &e : s.emission) {
        if (e.expert != k || e.regime != m) continue;
        Vec r = e.y;
        if (nb > 0) {
          r -= e.x * Eigen::Map<const Vec>(ep.loading.data(), nb);
        }
        acc += r * r.transpose();
        n += 1.0;
      }
      n *= inv;
      if (n > eps_n) {
        Mat r_new = acc * inv / n;
        linalg::floor_eigenvalues(r_new, cov_floor);
        ep.noise[m] = std::move(r_new);
      }
    }
  }
}

inline void mstep_transitions(const PosteriorStats &s, const std::vector<WindowRound> &data, ModelParams &p,
                              const EmConfig &cfg) {
  if (p.num_regimes <= 1 || data.size() < 2) return;
  std::vector<Vec> contexts;
  for (size_t t = 1; t < data.size(); ++t) contexts.push_back(data[t].x);
  p.transition.l2_weight = cfg.lambda_theta;
  transitions::ascend_transition_params(p.transition, contexts, s.xi, cfg.theta_steps, cfg.theta_step);
}

/// Complete-data log-likelihood of one latent draw under Θ.
inline double complete_log_likelihood(const std::vector<WindowRound> &data, const LatentPaths &paths,
                                      const ModelParams &p, const WindowPrior &prior, const EStepCache &c) {
  const Mat ll = regime_log_likelihoods(data, paths, p, prior, c);
  double v = std::log(std::max(prior.z(paths.z[0]), 1e-300));
  for (size_t t = 0; t < data.size(); ++t) {
    v += ll(static_cast<Eigen::Index>(t), paths.z[t]);
    if (t >= 1) v += c.log_pi[t](paths.z[t - 1], paths.z[t]);
  }
  return v;
}

/// Blocked Gibbs E-step. Returns the post-burn-in draws.
template <class Rng>
std::vector<LatentPaths> gibbs_sample(const std::vector<WindowRound> &data, const ModelParams &p,
                                      const WindowPrior &prior, const ExpertSet &experts, int n_samp, int n_burn,
                                      Rng &rng, LatentPaths *warm_start = nullptr) {
  const EStepCache c = build_cache(data, p, prior, experts);
  LatentPaths s = warm_start != nullptr ? *warm_start : initial_paths(data, p, prior, experts, c, rng);
  std::vector<LatentPaths> kept;
  kept.reserve(static_cast<size_t>(n_samp - n_burn));
  for (int it = 0; it < n_samp; ++it) {
    s.z = ffbs_regimes(data, s, p, prior, c, rng);
    s.g = smooth_global(data, s.z, s, p, prior, rng);
    for (ExpertId k : experts) s.u[k] = smooth_idiosyncratic(data, s.z, s.g, p, prior, k, rng);
    if (it >= n_burn) kept.push_back(s);
  }
  if (warm_start != nullptr) *warm_start = s;
  return kept;
}

/// Ensure every queried expert has emission parameters (defaults: zero B, identity R).
inline void ensure_expert_params(ModelParams &p, const ExpertSet &experts) {
  for (ExpertId k : experts) {
    if (p.experts.count(k) == 0) {
      ExpertParams e;
      e.loading = Mat::Zero(p.d_alpha, p.d_g);
      e.noise.assign(p.num_regimes, Mat::Identity(p.d_y, p.d_y));
      p.experts[k] = e;
    }
  }
}

/// Windowed Monte-Carlo EM. `trace`, when given, receives the surrogate
/// objective (mean complete-data log-likelihood of the iteration's draws
/// under the updated Θ) and its batch-means standard error.
template <class Rng>
ModelParams run_mcem(const std::vector<WindowRound> &data, ModelParams params, const EmConfig &cfg, int n_iter,
                     Rng &rng, const std::optional<WindowPrior> &prior_in = std::nullopt, EmTrace *trace = nullptr) {
  cfg.validate();
  if (n_iter <= 0) {
    return params;
  }
  if (data.size() < 2) {
    throw ConfigError("run_mcem: window needs at least 2 rounds");
  }
  const ExpertSet experts = queried_experts(data);
  ensure_expert_params(params, experts);
  const WindowPrior prior = prior_in ? *prior_in : default_window_prior(params, experts);
  for (ExpertId k : experts) {
    if (prior.u.count(k) == 0) throw ConfigError("run_mcem: window prior lacks expert " + std::to_string(k));
  }
  LatentPaths chain;
  bool warm = false;
  for (int iter = 0; iter < n_iter; ++iter) {
    try {
      std::vector<LatentPaths> draws =
          gibbs_sample(data, params, prior, experts, cfg.n_samp, cfg.n_burn, rng, warm ? &chain : nullptr);
      chain = draws.back();
      warm = true;
      PosteriorStats stats = empty_stats(static_cast<int>(data.size()), params);
      for (const auto &d : draws) accumulate(stats, data, d, params);
      finalize(stats);
      if (cfg.learn_dynamics) mstep_dynamics(stats, params, cfg.eps_n, cfg.cov_floor);
      if (cfg.learn_emission) mstep_emission(stats, params, cfg.eps_n, cfg.lambda_b, cfg.cov_floor);
      if (cfg.learn_transitions) mstep_transitions(stats, data, params, cfg);
      params.validate();
      if (trace != nullptr) {
        const EStepCache c = build_cache(data, params, prior, experts);
        std::vector<double> vals;
        for (const auto &d : draws) vals.push_back(complete_log_likelihood(data, d, params, prior, c));
        const int nb = std::min<int>(10, static_cast<int>(vals.size()));
        const size_t per = vals.size() / static_cast<size_t>(nb);
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (int b = 0; b < nb; ++b) {
          double bm = 0.0;
          for (size_t i = b * per; i < (b + 1) * per; ++i) bm += vals[i];
          bm /= static_cast<double>(per);
          var += (bm - mean) * (bm - mean);
        }
        const double se = nb > 1 ? std::sqrt(var / (nb - 1) / nb) : 0.0;
        trace->objective.push_back(mean);
        trace->objective_se.push_back(se);
        trace->occupancy.push_back(stats.n_g);
      }
    } catch (const NumericalError &e) {
      throw NumericalError("EM iteration " + std::to_string(iter) + ": " + e.what());
    }
  }
  return params;
}

template <class Rng>
ModelParams run_mcem(const std::vector<WindowRound> &data, const ModelParams &params, const EmConfig &cfg, Rng &rng,
                     const std::optional<WindowPrior> &prior = std::nullopt, EmTrace *trace = nullptr) {
  return run_mcem(data, params, cfg, cfg.n_em, rng, prior, trace);
}

/// Sliding-window schedule: true when an update is due at round t.
inline bool online_update_due(int t, const EmConfig &cfg) { return t >= cfg.window && t % cfg.period == 0; }

} // namespace learning
} // namespace l2d
