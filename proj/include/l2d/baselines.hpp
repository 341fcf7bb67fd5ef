#pragma once

#include "l2d/common.hpp"
#include "l2d/linalg.hpp"
#include "l2d/policy.hpp"
#include "l2d/rng.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace l2d {

/// Per-arm ridge statistics for lower-confidence-bound cost routing.
class LinUcb : public Policy {
public:
  struct Arm {
    Mat v;     // λI + Σ φφᵀ
    Mat v_inv; // maintained by Sherman–Morrison
    Vec b;     // Σ φ·cost
  };

  LinUcb(int num_experts, int feature_dim, double alpha = 5.0, double lambda = 1.0, bool full_solve = false)
      : alpha_(alpha), lambda_(lambda), full_solve_(full_solve), dim_(feature_dim) {
    if (lambda <= 0.0) {
      throw ConfigError("linucb: lambda must be > 0");
    }
    for (int k = 0; k < num_experts; ++k) {
      arms_[k] = fresh_arm();
    }
  }

  std::string name() const override { return "linucb"; }

  Vec theta(ExpertId k) const {
    const Arm &a = arm(k);
    return full_solve_ ? Vec(a.v.llt().solve(a.b)) : Vec(a.v_inv * a.b);
  }
  double predicted_cost(ExpertId k, const Vec &phi) const { return phi.dot(theta(k)); }
  double bonus(ExpertId k, const Vec &phi) const {
    const Arm &a = arm(k);
    const double q = full_solve_ ? phi.dot(a.v.llt().solve(phi)) : phi.dot(a.v_inv * phi);
    return alpha_ * std::sqrt(std::max(q, 0.0));
  }

  ExpertId select(const DecisionContext &ctx) override {
    last_.clear();
    ExpertId best = -1;
    double best_score = std::numeric_limits<double>::infinity();
    ExpertSet avail = ctx.available;
    std::sort(avail.begin(), avail.end());
    for (ExpertId k : avail) {
      const double c = predicted_cost(k, ctx.x);
      last_[k] = c;
      const double score = c - bonus(k, ctx.x);
      if (score < best_score) {
        best_score = score;
        best = k;
      }
    }
    return best;
  }

  void update(const DecisionContext &ctx, const Feedback &fb) override { observe(fb.queried, ctx.x, fb.cost); }

  void observe(ExpertId k, const Vec &phi, double cost) {
    Arm &a = arm(k);
    a.v += phi * phi.transpose();
    const Vec vp = a.v_inv * phi;
    a.v_inv -= vp * vp.transpose() / (1.0 + phi.dot(vp));
    linalg::symmetrize(a.v_inv);
    a.b += phi * cost;
  }

  PolicyDiagnostics diagnostics() const override {
    PolicyDiagnostics d;
    d.predicted_cost = last_;
    return d;
  }

  const Arm &arm(ExpertId k) const {
    auto it = arms_.find(k);
    if (it == arms_.end()) throw RegistryError("linucb: unknown arm " + std::to_string(k));
    return it->second;
  }

private:
  Arm &arm(ExpertId k) {
    auto it = arms_.find(k);
    if (it == arms_.end()) it = arms_.emplace(k, fresh_arm()).first;
    return it->second;
  }
  Arm fresh_arm() const {
    return {lambda_ * Mat::Identity(dim_, dim_), Mat::Identity(dim_, dim_) / lambda_, Vec::Zero(dim_)};
  }

  double alpha_, lambda_;
  bool full_solve_;
  int dim_;
  std::map<ExpertId, Arm> arms_;
  std::map<ExpertId, double> last_;
};

/// Two-layer tanh network with a shared encoder and per-expert linear heads.
/// Parameters are stored flat: W1 (H×d, row-major), b1, W2 (H×H, row-major), b2,
/// then for each expert k: w_k (H), c_k.
class CostNetwork {
public:
  CostNetwork() = default;
  CostNetwork(int input_dim, int hidden, int num_experts, std::uint64_t seed)
      : d_(input_dim), h_(hidden), k_(num_experts) {
    params_ = Vec::Zero(num_parameters());
    Rng rng = derive_rng(seed, "neuralucb-init");
    std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(static_cast<double>(d_)));
    std::normal_distribution<double> n2(0.0, 1.0 / std::sqrt(static_cast<double>(h_)));
    for (int i = 0; i < h_ * d_; ++i) params_(off_w1() + i) = n1(rng);
    for (int i = 0; i < h_ * h_; ++i) params_(off_w2() + i) = n2(rng);
    for (int k = 0; k < k_; ++k) {
      for (int i = 0; i < h_; ++i) params_(off_head(k) + i) = n2(rng);
    }
  }

  Eigen::Index num_parameters() const { return h_ * d_ + h_ + h_ * h_ + h_ + k_ * (h_ + 1); }
  int num_experts() const { return k_; }
  Vec &params() { return params_; }
  const Vec &params() const { return params_; }

  /// Output f(x, k) and (optionally) its gradient with respect to all parameters.
  double forward(const Vec &x, int k, Vec *grad = nullptr) const {
    if (k < 0 || k >= k_) throw RegistryError("neuralucb: unknown arm " + std::to_string(k));
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w1(
        params_.data() + off_w1(), h_, d_);
    const Eigen::Map<const Vec> b1(params_.data() + off_b1(), h_);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w2(
        params_.data() + off_w2(), h_, h_);
    const Eigen::Map<const Vec> b2(params_.data() + off_b2(), h_);
    const Eigen::Map<const Vec> wk(params_.data() + off_head(k), h_);
    const double ck = params_(off_head(k) + h_);
    const Vec a1 = (w1 * x + b1).array().tanh().matrix();
    const Vec a2 = (w2 * a1 + b2).array().tanh().matrix();
    const double f = wk.dot(a2) + ck;
    if (grad != nullptr) {
      grad->setZero(num_parameters());
      const Vec d2 = wk.cwiseProduct((1.0 - a2.array().square()).matrix());
      const Vec d1 = (w2.transpose() * d2).cwiseProduct((1.0 - a1.array().square()).matrix());
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          grad->data() + off_w1(), h_, d_) = d1 * x.transpose();
      grad->segment(off_b1(), h_) = d1;
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          grad->data() + off_w2(), h_, h_) = d2 * a1.transpose();
      grad->segment(off_b2(), h_) = d2;
      grad->segment(off_head(k), h_) = a2;
      (*grad)(off_head(k) + h_) = 1.0;
    }
    return f;
  }

  /// Squared-error loss (f(x,k) − c)² and its gradient.
  double loss(const Vec &x, int k, double c, Vec *grad = nullptr) const {
    Vec g;
    const double f = forward(x, k, grad != nullptr ? &g : nullptr);
    if (grad != nullptr) *grad = 2.0 * (f - c) * g;
    return (f - c) * (f - c);
  }

private:
  Eigen::Index off_w1() const { return 0; }
  Eigen::Index off_b1() const { return h_ * d_; }
  Eigen::Index off_w2() const { return off_b1() + h_; }
  Eigen::Index off_b2() const { return off_w2() + h_ * h_; }
  Eigen::Index off_head(int k) const { return off_b2() + h_ + k * (h_ + 1); }

  int d_ = 1, h_ = 16, k_ = 1;
  Vec params_;
};

class NeuralUcb : public Policy {
public:
  NeuralUcb(int num_experts, int input_dim, std::uint64_t seed, double alpha = 5.0, double lambda = 1.0,
            double learning_rate = 1e-3, int hidden = 16, bool full_solve = false)
      : net_(input_dim, hidden, num_experts, seed), alpha_(alpha), lambda_(lambda), lr_(learning_rate),
        full_solve_(full_solve) {
    if (lambda <= 0.0) throw ConfigError("neuralucb: lambda must be > 0");
    const Eigen::Index p = net_.num_parameters();
    a_ = lambda * Mat::Identity(p, p);
    a_inv_ = Mat::Identity(p, p) / lambda;
  }

  std::string name() const override { return "neuralucb"; }

  double bonus(const Vec &h) const {
    const double q = full_solve_ ? h.dot(a_.llt().solve(h)) : h.dot(a_inv_ * h);
    return alpha_ * std::sqrt(std::max(q, 0.0));
  }

  ExpertId select(const DecisionContext &ctx) override {
    last_.clear();
    ExpertId best = -1;
    double best_score = std::numeric_limits<double>::infinity();
    ExpertSet avail = ctx.available;
    std::sort(avail.begin(), avail.end());
    Vec h;
    for (ExpertId k : avail) {
      const double f = net_.forward(ctx.x, k, &h);
      last_[k] = f;
      const double score = f - bonus(h);
      if (score < best_score) {
        best_score = score;
        best = k;
      }
    }
    return best;
  }

  void update(const DecisionContext &ctx, const Feedback &fb) override {
    Vec h;
    net_.forward(ctx.x, fb.queried, &h);
    Vec grad;
    const double l = net_.loss(ctx.x, fb.queried, fb.cost, &grad);
    if (!std::isfinite(l)) {
      throw NumericalError("neuralucb: non-finite loss at round " + std::to_string(fb.t));
    }
    net_.params() -= lr_ * grad;
    add_feature(h);
  }

  void add_feature(const Vec &h) {
    a_.noalias() += h * h.transpose();
    const Vec ah = a_inv_ * h;
    a_inv_.noalias() -= ah * ah.transpose() / (1.0 + h.dot(ah));
  }

  PolicyDiagnostics diagnostics() const override {
    PolicyDiagnostics d;
    d.predicted_cost = last_;
    return d;
  }

  const CostNetwork &network() const { return net_; }

private:
  CostNetwork net_;
  double alpha_, lambda_, lr_;
  bool full_solve_;
  Mat a_, a_inv_;
  std::map<ExpertId, double> last_;
};

class RandomPolicy : public Policy {
public:
  explicit RandomPolicy(std::uint64_t seed) : rng_(derive_rng(seed, "policy-random")) {}
  std::string name() const override { return "random"; }
  ExpertId select(const DecisionContext &ctx) override {
    if (ctx.available.empty()) throw ProtocolError("random: empty available set");
    ExpertSet avail = ctx.available;
    std::sort(avail.begin(), avail.end());
    std::uniform_int_distribution<size_t> u(0, avail.size() - 1);
    return avail[u(rng_)];
  }
  void update(const DecisionContext &, const Feedback &) override {}

private:
  Rng rng_;
};

/// Always expert k; falls back to a uniform draw (counted) when k is unavailable.
class FixedPolicy : public Policy {
public:
  FixedPolicy(ExpertId k, std::uint64_t seed) : k_(k), rng_(derive_rng(seed, "policy-fixed")) {}
  std::string name() const override { return "fixed:" + std::to_string(k_); }
  ExpertId select(const DecisionContext &ctx) override {
    if (std::find(ctx.available.begin(), ctx.available.end(), k_) != ctx.available.end()) {
      last_fallback_ = false;
      return k_;
    }
    ++fallbacks_;
    last_fallback_ = true;
    ExpertSet avail = ctx.available;
    std::sort(avail.begin(), avail.end());
    std::uniform_int_distribution<size_t> u(0, avail.size() - 1);
    return avail[u(rng_)];
  }
  void update(const DecisionContext &, const Feedback &) override {}
  ExpertId expert() const { return k_; }
  int fallbacks() const { return fallbacks_; }
  bool last_was_fallback() const { return last_fallback_; }

private:
  ExpertId k_;
  Rng rng_;
  int fallbacks_ = 0;
  bool last_fallback_ = false;
};

class OraclePolicy : public HindsightPolicy {
public:
  std::string name() const override { return "oracle"; }
  ExpertId select(const DecisionContext &ctx, const std::map<ExpertId, double> &costs) override {
    ExpertId best = -1;
    double best_cost = std::numeric_limits<double>::infinity();
    ExpertSet avail = ctx.available;
    std::sort(avail.begin(), avail.end());
    for (ExpertId k : avail) {
      auto it = costs.find(k);
      if (it == costs.end()) throw ProtocolError("oracle: cost of expert " + std::to_string(k) + " unavailable");
      if (it->second < best_cost) {
        best_cost = it->second;
        best = k;
      }
    }
    return best;
  }
};

} // namespace l2d
