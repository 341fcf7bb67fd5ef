#pragma once

#include "l2d/common.hpp"
#include "l2d/linalg.hpp"
#include "l2d/transitions.hpp"

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace l2d {

struct GaussianBelief {
  Vec mean;
  Mat cov;

  Eigen::Index dim() const { return mean.size(); }

  static GaussianBelief standard(Eigen::Index dim, double variance = 1.0) {
    return {Vec::Zero(dim), variance * Mat::Identity(dim, dim)};
  }
};

/// Φ: context → d_alpha × d_y matrix. Only d_y = 1 maps are shipped; a
/// `custom` map may return any d_alpha × d_y matrix.
class FeatureMap {
public:
  enum class Kind { identity_pad, fixed_projection, custom };
  using CustomFn = std::function<Mat(const Vec &)>;

  static FeatureMap identity_pad(int context_dim, int alpha_dim) {
    FeatureMap fm;
    fm.kind_ = Kind::identity_pad;
    fm.context_dim_ = context_dim;
    fm.alpha_dim_ = alpha_dim;
    fm.name_ = "identity_pad";
    return fm;
  }

  static FeatureMap fixed_projection(Mat projection) {
    FeatureMap fm;
    fm.kind_ = Kind::fixed_projection;
    fm.context_dim_ = static_cast<int>(projection.cols());
    fm.alpha_dim_ = static_cast<int>(projection.rows());
    fm.projection_ = std::move(projection);
    fm.name_ = "fixed_projection";
    return fm;
  }

  static FeatureMap custom(std::string name, int context_dim, int alpha_dim, int obs_dim, CustomFn fn) {
    FeatureMap fm;
    fm.kind_ = Kind::custom;
    fm.context_dim_ = context_dim;
    fm.alpha_dim_ = alpha_dim;
    fm.obs_dim_ = obs_dim;
    fm.custom_ = std::move(fn);
    fm.name_ = std::move(name);
    return fm;
  }

  /// Φ(x) = (1, x_1, x_2, ...) zero-padded or truncated to d_alpha.
  /// With d_alpha = 1 this is the constant map Φ ≡ 1.
  static FeatureMap intercept_pad(int context_dim, int alpha_dim) {
    return custom("intercept_pad", context_dim, alpha_dim, 1, [alpha_dim](const Vec &x) {
      Mat phi = Mat::Zero(alpha_dim, 1);
      phi(0, 0) = 1.0;
      const Eigen::Index n = std::min<Eigen::Index>(x.size(), alpha_dim - 1);
      phi.block(1, 0, n, 1) = x.head(n);
      return phi;
    });
  }

  Kind kind() const { return kind_; }
  const std::string &name() const { return name_; }
  int context_dim() const { return context_dim_; }
  int alpha_dim() const { return alpha_dim_; }
  int obs_dim() const { return obs_dim_; }
  const Mat &projection() const { return projection_; }

  Mat apply(const Vec &x) const {
    if (x.size() != context_dim_) {
      throw ConfigError("feature map '" + name_ + "': context has dimension " +
                        std::to_string(x.size()) + ", expected " + std::to_string(context_dim_));
    }
    switch (kind_) {
    case Kind::identity_pad: {
      Mat phi = Mat::Zero(alpha_dim_, 1);
      const Eigen::Index n = std::min<Eigen::Index>(x.size(), alpha_dim_);
      phi.block(0, 0, n, 1) = x.head(n);
      return phi;
    }
    case Kind::fixed_projection:
      return projection_ * x;
    case Kind::custom: {
      Mat phi = custom_(x);
      if (phi.rows() != alpha_dim_ || phi.cols() != obs_dim_) {
        throw ConfigError("feature map '" + name_ + "' returned a wrongly shaped matrix");
      }
      return phi;
    }
    }
    return {};
  }

private:
  Kind kind_ = Kind::identity_pad;
  int context_dim_ = 1;
  int alpha_dim_ = 1;
  int obs_dim_ = 1;
  Mat projection_;
  CustomFn custom_;
  std::string name_;
};

inline Mat apply_feature_map(const FeatureMap &fm, const Vec &x) { return fm.apply(x); }

/// Per-expert emission parameters: loading B_k (d_alpha × d_g),
/// per-regime noise R_{m,k} (d_y × d_y) and query fee β_k.
struct ExpertParams {
  Mat loading;
  std::vector<Mat> noise;
  double fee = 0.0;
};

struct ModelParams {
  int num_regimes = 1;
  int d_g = 1;
  int d_alpha = 1;
  int d_y = 1;
  int d_context = 1;
  int d_attn = 1;

  TransitionParams transition;
  std::vector<Mat> A_g, Q_g; // per regime
  std::vector<Mat> A_u, Q_u; // per regime, shared across experts
  std::map<ExpertId, ExpertParams> experts;

  Vec prior_z;
  std::vector<GaussianBelief> prior_g;     // g_0 per regime
  std::vector<GaussianBelief> birth_prior; // u_{t-1,j} on entry, per regime

  /// Defaults: uniform p(z_1), N(0, I) for g_0, N(0, σ_init² I) birth prior,
  /// A = a·I and Q = q·I for both latent blocks, sticky transitions.
  static ModelParams defaults(int num_regimes, int d_g, int d_alpha, int d_context, int d_attn,
                              double sigma_init = 1.0, double stay = 0.95) {
    ModelParams p;
    p.num_regimes = num_regimes;
    p.d_g = d_g;
    p.d_alpha = d_alpha;
    p.d_y = 1;
    p.d_context = d_context;
    p.d_attn = d_attn;
    p.transition = num_regimes > 1 && d_attn >= num_regimes
                       ? TransitionParams::sticky(num_regimes, d_attn, d_context, stay)
                       : TransitionParams::zeros(num_regimes, d_attn, d_context);
    for (int m = 0; m < num_regimes; ++m) {
      p.A_g.push_back(Mat::Identity(d_g, d_g));
      p.Q_g.push_back(0.01 * Mat::Identity(d_g, d_g));
      p.A_u.push_back(Mat::Identity(d_alpha, d_alpha));
      p.Q_u.push_back(0.01 * Mat::Identity(d_alpha, d_alpha));
      p.prior_g.push_back(GaussianBelief::standard(d_g));
      p.birth_prior.push_back(GaussianBelief::standard(d_alpha, sigma_init * sigma_init));
    }
    p.prior_z = Vec::Constant(num_regimes, 1.0 / num_regimes);
    return p;
  }

  void validate() const {
    auto fail = [](const std::string &msg) { throw ConfigError("ModelParams: " + msg); };
    const auto M = static_cast<size_t>(num_regimes);
    if (num_regimes < 1 || d_g < 0 || d_alpha < 1 || d_y < 1 || d_context < 1 || d_attn < 1) {
      fail("dimensions must be positive (d_g may be 0)");
    }
    if (A_g.size() != M || Q_g.size() != M || A_u.size() != M || Q_u.size() != M ||
        prior_g.size() != M || birth_prior.size() != M) {
      fail("per-regime parameter vectors must have num_regimes entries");
    }
    if (prior_z.size() != num_regimes || (prior_z.array() < 0.0).any() ||
        std::abs(prior_z.sum() - 1.0) > 1e-12) {
      fail("prior_z must be a probability vector");
    }
    if (transition.num_regimes() != num_regimes || transition.context_dim() != d_context) {
      fail("transition parameter shapes do not match (num_regimes, d_context)");
    }
    auto check_spd = [&](const Mat &m, Eigen::Index dim, const std::string &what) {
      if (m.rows() != dim || m.cols() != dim) {
        fail(what + " has wrong shape");
      }
      if (dim == 0) {
        return;
      }
      if (!linalg::is_symmetric(m, 1e-10) || linalg::min_eigenvalue(m) <= 0.0) {
        fail(what + " must be symmetric positive definite");
      }
    };
    for (size_t m = 0; m < M; ++m) {
      const std::string r = "[regime " + std::to_string(m) + "]";
      if (A_g[m].rows() != d_g || A_g[m].cols() != d_g) fail("A_g" + r + " has wrong shape");
      if (A_u[m].rows() != d_alpha || A_u[m].cols() != d_alpha) fail("A_u" + r + " has wrong shape");
      check_spd(Q_g[m], d_g, "Q_g" + r);
      check_spd(Q_u[m], d_alpha, "Q_u" + r);
      check_spd(birth_prior[m].cov, d_alpha, "birth_prior" + r);
      if (prior_g[m].mean.size() != d_g || prior_g[m].cov.rows() != d_g) fail("prior_g" + r + " has wrong shape");
    }
    for (const auto &[k, e] : experts) {
      const std::string r = "[expert " + std::to_string(k) + "]";
      if (e.loading.rows() != d_alpha || e.loading.cols() != d_g) fail("B" + r + " has wrong shape");
      if (e.noise.size() != M) fail("R" + r + " must have num_regimes entries");
      for (size_t m = 0; m < M; ++m) check_spd(e.noise[m], d_y, "R" + r);
      if (e.fee < 0.0) fail("beta" + r + " must be nonnegative");
    }
  }
};

/// Mode-conditioned predictive moments of an expert residual.
struct EmissionMoments {
  Vec mean;
  Mat cov;
};

/// Mean H μ_g + Φᵀ μ_u and covariance H Σ_g Hᵀ + Φᵀ Σ_u Φ + R, with H = Φᵀ B.
inline EmissionMoments emission_moments(const Mat &phi, const Mat &loading, const GaussianBelief &g,
                                        const GaussianBelief &u, const Mat &noise) {
  const Mat h = phi.transpose() * loading;
  EmissionMoments out;
  out.mean = phi.transpose() * u.mean;
  out.cov = phi.transpose() * u.cov * phi + noise;
  if (h.cols() > 0) {
    out.mean += h * g.mean;
    out.cov += h * g.cov * h.transpose();
  }
  linalg::symmetrize(out.cov);
  return out;
}

inline EmissionMoments emission_moments(const ModelParams &params, const FeatureMap &fm, const Vec &x,
                                        int regime, const GaussianBelief &g, const GaussianBelief &u,
                                        ExpertId k) {
  const auto it = params.experts.find(k);
  if (it == params.experts.end()) {
    throw RegistryError("emission_moments: unknown expert " + std::to_string(k));
  }
  return emission_moments(fm.apply(x), it->second.loading, g, u, it->second.noise.at(regime));
}

inline void check_simplex(const Vec &w, double tol, const char *where) {
  if ((w.array() < -tol).any() || std::abs(w.sum() - 1.0) > tol) {
    throw NumericalError(std::string(where) + ": weights are not a probability vector");
  }
}

/// Squared-loss predicted cost Σ_m w_m (tr Σ_m + ‖μ_m‖²) + β.
inline double expected_cost_mixture(const Vec &weights, const std::vector<EmissionMoments> &moments,
                                     double fee) {
  check_simplex(weights, 1e-9, "expected_cost_mixture");
  double c = 0.0;
  for (size_t m = 0; m < moments.size(); ++m) {
    c += weights(static_cast<Eigen::Index>(m)) * (moments[m].cov.trace() + moments[m].mean.squaredNorm());
  }
  return c + fee;
}

/// Monte-Carlo predicted cost for a general loss ψ: Σ_m w_m E_{N(μ_m,Σ_m)}[ψ(E)] + β.
template <class Loss, class Rng>
double expected_cost_mixture_mc(const Vec &weights, const std::vector<EmissionMoments> &moments,
                                double fee, Loss &&loss, int samples, Rng &rng) {
  check_simplex(weights, 1e-9, "expected_cost_mixture_mc");
  double c = 0.0;
  for (size_t m = 0; m < moments.size(); ++m) {
    const Mat l = linalg::psd_sqrt(moments[m].cov);
    double acc = 0.0;
    for (int s = 0; s < samples; ++s) {
      const Vec e = moments[m].mean + l * linalg::standard_normal(moments[m].mean.size(), rng);
      acc += loss(e);
    }
    c += weights(static_cast<Eigen::Index>(m)) * acc / samples;
  }
  return c + fee;
}

} // namespace l2d
