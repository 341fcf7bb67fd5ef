#pragma once

#include "l2d/common.hpp"
#include "l2d/linalg.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace l2d {

/// Low-rank scaled-attention parameterization of the context-dependent
/// regime transition matrix. Row ℓ of the query (key) map is the affine
/// function query_weights[ℓ]·x + query_bias.row(ℓ).
struct TransitionParams {
  std::vector<Mat> query_weights; // M entries, each d_attn × d_context
  Mat query_bias;                 // M × d_attn
  std::vector<Mat> key_weights;   // M entries, each d_attn × d_context
  Mat key_bias;                   // M × d_attn
  double l2_weight = 0.0;         // λ_θ

  int num_regimes() const { return static_cast<int>(query_bias.rows()); }
  int attn_dim() const { return static_cast<int>(query_bias.cols()); }
  int context_dim() const {
    return query_weights.empty() ? 0 : static_cast<int>(query_weights.front().cols());
  }

  static TransitionParams zeros(int num_regimes, int attn_dim, int context_dim) {
    TransitionParams tp;
    tp.query_weights.assign(num_regimes, Mat::Zero(attn_dim, context_dim));
    tp.key_weights.assign(num_regimes, Mat::Zero(attn_dim, context_dim));
    tp.query_bias = Mat::Zero(num_regimes, attn_dim);
    tp.key_bias = Mat::Zero(num_regimes, attn_dim);
    return tp;
  }

  /// Context-independent "sticky" initialization: the logits are
  /// s·I so every row keeps probability `stay` on its own regime.
  /// Requires attn_dim ≥ num_regimes (the identity logit matrix has rank M).
  static TransitionParams sticky(int num_regimes, int attn_dim, int context_dim, double stay) {
    TransitionParams tp = zeros(num_regimes, attn_dim, context_dim);
    if (num_regimes <= 1) {
      return tp;
    }
    if (attn_dim < num_regimes) {
      throw ConfigError("sticky transition init needs d_attn >= num_regimes");
    }
    if (!(stay > 0.0 && stay < 1.0)) {
      throw ConfigError("sticky transition init needs 0 < stay < 1");
    }
    const double m = num_regimes;
    const double logit = std::log(stay * (m - 1.0) / (1.0 - stay));
    const double scale = std::sqrt(logit * std::sqrt(static_cast<double>(attn_dim)));
    for (int l = 0; l < num_regimes; ++l) {
      tp.query_bias(l, l) = scale;
      tp.key_bias(l, l) = scale;
    }
    return tp;
  }

  Eigen::Index num_parameters() const {
    const Eigen::Index m = num_regimes(), a = attn_dim(), d = context_dim();
    return 2 * (m * a * d + m * a);
  }

  /// Flatten θ in the fixed order (W_Q rows, b_Q, W_K rows, b_K).
  Vec pack() const {
    Vec theta(num_parameters());
    Eigen::Index pos = 0;
    auto put = [&](const Mat &m) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
          theta(pos++) = m(i, j);
        }
      }
    };
    for (const auto &w : query_weights) put(w);
    put(query_bias);
    for (const auto &w : key_weights) put(w);
    put(key_bias);
    return theta;
  }

  void unpack(const Vec &theta) {
    if (theta.size() != num_parameters()) {
      throw ConfigError("TransitionParams::unpack: size mismatch");
    }
    Eigen::Index pos = 0;
    auto get = [&](Mat &m) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
          m(i, j) = theta(pos++);
        }
      }
    };
    for (auto &w : query_weights) get(w);
    get(query_bias);
    for (auto &w : key_weights) get(w);
    get(key_bias);
  }
};

namespace transitions {

inline Mat query_matrix(const TransitionParams &tp, const Vec &x) {
  Mat q(tp.num_regimes(), tp.attn_dim());
  for (int l = 0; l < tp.num_regimes(); ++l) {
    q.row(l) = (tp.query_weights[l] * x).transpose() + tp.query_bias.row(l);
  }
  return q;
}

inline Mat key_matrix(const TransitionParams &tp, const Vec &x) {
  Mat k(tp.num_regimes(), tp.attn_dim());
  for (int l = 0; l < tp.num_regimes(); ++l) {
    k.row(l) = (tp.key_weights[l] * x).transpose() + tp.key_bias.row(l);
  }
  return k;
}

/// S(x) = Q(x) K(x)ᵀ / √d_attn.
inline Mat logits(const TransitionParams &tp, const Vec &x) {
  if (x.size() != tp.context_dim()) {
    throw ConfigError("transition logits: context has dimension " + std::to_string(x.size()) +
                      ", expected " + std::to_string(tp.context_dim()));
  }
  return query_matrix(tp, x) * key_matrix(tp, x).transpose() /
         std::sqrt(static_cast<double>(tp.attn_dim()));
}

inline Mat row_softmax(const Mat &s) {
  Mat p(s.rows(), s.cols());
  for (Eigen::Index l = 0; l < s.rows(); ++l) {
    if (!s.row(l).allFinite()) {
      throw NumericalError("transition_matrix: non-finite logits in row " + std::to_string(l));
    }
    const double mx = s.row(l).maxCoeff();
    Eigen::RowVectorXd e = (s.row(l).array() - mx).exp();
    p.row(l) = e / e.sum();
  }
  return p;
}

inline Mat transition_matrix(const TransitionParams &tp, const Vec &x) {
  if (tp.num_regimes() == 1) {
    return Mat::Ones(1, 1);
  }
  return row_softmax(logits(tp, x));
}

/// Σ_t Σ_{ℓ,m} ξ_t(ℓ,m) log Π_θ(x_t)_{ℓm} − (λ_θ/2)‖θ‖². `responsibilities[i]`
/// pairs with `contexts[i]` (one entry per interior round of the window).
inline double transition_log_likelihood(const TransitionParams &tp, const std::vector<Vec> &contexts,
                                        const std::vector<Mat> &responsibilities) {
  if (contexts.size() != responsibilities.size()) {
    throw ConfigError("transition_log_likelihood: contexts/responsibilities size mismatch");
  }
  double total = 0.0;
  for (size_t i = 0; i < contexts.size(); ++i) {
    const Mat &xi = responsibilities[i];
    if (xi.isZero(0.0)) {
      continue;
    }
    const Mat s = logits(tp, contexts[i]);
    for (Eigen::Index l = 0; l < s.rows(); ++l) {
      const double lse = linalg::log_sum_exp(Vec(s.row(l).transpose()));
      for (Eigen::Index m = 0; m < s.cols(); ++m) {
        if (xi(l, m) != 0.0) {
          total += xi(l, m) * (s(l, m) - lse);
        }
      }
    }
  }
  if (tp.l2_weight > 0.0) {
    total -= 0.5 * tp.l2_weight * tp.pack().squaredNorm();
  }
  return total;
}

/// Analytic gradient of transition_log_likelihood with respect to pack()-ordered θ.
inline Vec transition_log_likelihood_gradient(const TransitionParams &tp,
                                              const std::vector<Vec> &contexts,
                                              const std::vector<Mat> &responsibilities) {
  TransitionParams grad = TransitionParams::zeros(tp.num_regimes(), tp.attn_dim(), tp.context_dim());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(tp.attn_dim()));
  for (size_t i = 0; i < contexts.size(); ++i) {
    const Mat &xi = responsibilities[i];
    if (xi.isZero(0.0)) {
      continue;
    }
    const Vec &x = contexts[i];
    const Mat q = query_matrix(tp, x);
    const Mat k = key_matrix(tp, x);
    const Mat pi = row_softmax(q * k.transpose() * inv_sqrt);
    // dL/dS_{ℓm} = ξ_{ℓm} − (Σ_j ξ_{ℓj}) Π_{ℓm}
    const Vec row_mass = xi.rowwise().sum();
    const Mat g_s = xi - row_mass.asDiagonal() * pi;
    const Mat g_q = g_s * k * inv_sqrt;
    const Mat g_k = g_s.transpose() * q * inv_sqrt;
    for (int l = 0; l < tp.num_regimes(); ++l) {
      grad.query_weights[l] += g_q.row(l).transpose() * x.transpose();
      grad.key_weights[l] += g_k.row(l).transpose() * x.transpose();
    }
    grad.query_bias += g_q;
    grad.key_bias += g_k;
  }
  Vec g = grad.pack();
  if (tp.l2_weight > 0.0) {
    g -= tp.l2_weight * tp.pack();
  }
  return g;
}

/// Full-batch gradient ascent on the transition objective. Returns the final objective.
inline double ascend_transition_params(TransitionParams &tp, const std::vector<Vec> &contexts,
                                       const std::vector<Mat> &responsibilities, int steps,
                                       double step_size) {
  if (tp.num_regimes() <= 1) {
    return transition_log_likelihood(tp, contexts, responsibilities);
  }
  // Normalize by the responsibility mass so the step size is window-length independent.
  double mass = 0.0;
  for (const auto &xi : responsibilities) {
    mass += xi.sum();
  }
  if (mass <= 0.0) {
    return transition_log_likelihood(tp, contexts, responsibilities);
  }
  Vec theta = tp.pack();
  for (int it = 0; it < steps; ++it) {
    Vec g = transition_log_likelihood_gradient(tp, contexts, responsibilities);
    theta += (step_size / mass) * g;
    tp.unpack(theta);
  }
  return transition_log_likelihood(tp, contexts, responsibilities);
}

} // namespace transitions
} // namespace l2d
