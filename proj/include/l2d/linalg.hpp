#pragma once

#include "l2d/common.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <span>

namespace l2d::linalg {

inline constexpr double kEigenFloor = 1e-12;

inline void symmetrize(Mat &m) { m = 0.5 * (m + m.transpose()).eval(); }

inline Mat symmetrized(const Mat &m) { return 0.5 * (m + m.transpose()); }

/// Symmetrize, and if a Cholesky factorization fails clip the spectrum at `floor`.
inline void ensure_psd(Mat &m, double floor = kEigenFloor) {
  if (m.size() == 0) {
    return;
  }
  symmetrize(m);
  Eigen::LLT<Mat> llt(m);
  if (llt.info() == Eigen::Success) {
    return;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  Vec ev = es.eigenvalues().cwiseMax(floor);
  m = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  symmetrize(m);
}

/// Unconditional eigenvalue floor (used on M-step covariance estimates).
inline void floor_eigenvalues(Mat &m, double floor) {
  if (m.size() == 0) {
    return;
  }
  symmetrize(m);
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  if (es.eigenvalues().minCoeff() >= floor) {
    return;
  }
  Vec ev = es.eigenvalues().cwiseMax(floor);
  m = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  symmetrize(m);
}

inline double min_eigenvalue(const Mat &m) {
  if (m.size() == 0) {
    return 0.0;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrized(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline bool is_symmetric(const Mat &m, double tol) {
  return m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

/// log det of a symmetric positive-definite matrix; throws when not PD.
inline double log_det_spd(const Mat &m) {
  if (m.size() == 0) {
    return 0.0;
  }
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("log_det_spd: matrix is not positive definite");
  }
  const Mat &l = llt.matrixL();
  return 2.0 * l.diagonal().array().log().sum();
}

/// Solve A X = B for symmetric positive (semi)definite A. Falls back to a
/// jittered solve when A is numerically singular.
inline Mat solve_spd(const Mat &a, const Mat &b, double jitter = 1e-8) {
  Eigen::LLT<Mat> llt(a);
  if (llt.info() == Eigen::Success) {
    return llt.solve(b);
  }
  Mat aj = a + jitter * Mat::Identity(a.rows(), a.cols());
  Eigen::LDLT<Mat> ldlt(aj);
  if (ldlt.info() != Eigen::Success) {
    throw NumericalError("solve_spd: factorization failed");
  }
  return ldlt.solve(b);
}

inline double gaussian_logpdf(const Vec &x, const Vec &mean, const Mat &cov) {
  const auto d = static_cast<double>(x.size());
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("gaussian_logpdf: covariance is not positive definite");
  }
  const Vec diff = x - mean;
  const Vec white = llt.matrixL().solve(diff);
  const Mat &l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  return -0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det + white.squaredNorm());
}

/// Gaussian log density that tolerates singular covariance by flooring the
/// spectrum; used inside Gibbs conditionals where degenerate dynamics occur.
inline double gaussian_logpdf_floored(const Vec &x, const Vec &mean, const Mat &cov,
                                      double floor = 1e-10) {
  if (x.size() == 0) {
    return 0.0;
  }
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() == Eigen::Success) {
    const Mat l = llt.matrixL();
    if (l.diagonal().minCoeff() > 1e-7) {
      return gaussian_logpdf(x, mean, cov);
    }
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrized(cov));
  Vec ev = es.eigenvalues().cwiseMax(floor);
  const Vec diff = es.eigenvectors().transpose() * (x - mean);
  const auto d = static_cast<double>(x.size());
  return -0.5 * (d * std::log(2.0 * std::numbers::pi) + ev.array().log().sum() +
                 (diff.array().square() / ev.array()).sum());
}

inline double log_sum_exp(std::span<const double> values) {
  if (values.empty()) {
    return -std::numeric_limits<double>::infinity();
  }
  double a = values[0];
  for (double v : values) {
    a = std::max(a, v);
  }
  if (!std::isfinite(a)) {
    return a;
  }
  double s = 0.0;
  for (double v : values) {
    s += std::exp(v - a);
  }
  return a + std::log(s);
}

inline double log_sum_exp(const Vec &values) {
  return log_sum_exp(std::span<const double>(values.data(), static_cast<size_t>(values.size())));
}

/// Square-root factor L with L Lᵀ = cov, valid for PSD (possibly singular) input.
inline Mat psd_sqrt(const Mat &cov) {
  if (cov.size() == 0) {
    return cov;
  }
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() == Eigen::Success) {
    return llt.matrixL();
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrized(cov));
  Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal();
}

template <class Rng> Vec standard_normal(Eigen::Index n, Rng &rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i) = nd(rng);
  }
  return out;
}

template <class Rng> Vec sample_gaussian(const Vec &mean, const Mat &cov, Rng &rng) {
  if (mean.size() == 0) {
    return mean;
  }
  return mean + psd_sqrt(cov) * standard_normal(mean.size(), rng);
}

} // namespace l2d::linalg
