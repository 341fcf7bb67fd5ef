#include "l2d/imm_filter.hpp"
#include "l2d/registry.hpp"
#include "l2d/router.hpp"
#include "l2d/slds_filter.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace l2d;

namespace {

Mat rnd(Eigen::Index r, Eigen::Index c, Rng &rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Mat spd(Eigen::Index d, Rng &rng) {
  const Mat a = rnd(d, d, rng);
  return a * a.transpose() + 0.3 * Mat::Identity(d, d);
}

GaussianBelief rnd_belief(Eigen::Index d, Rng &rng) { return {rnd(d, 1, rng), spd(d, rng)}; }

Mat scalar(double v) { return Mat::Constant(1, 1, v); }

/// Posterior of s ~ N(μ, Σ) given e = H s + v, v ~ N(0, R), in information form.
std::pair<Vec, Mat> information_form_posterior(const Vec &mu, const Mat &sigma, const Mat &h, const Mat &r,
                                               const Vec &e) {
  const Mat sigma_inv = sigma.inverse();
  const Mat r_inv = r.inverse();
  const Mat precision = sigma_inv + h.transpose() * r_inv * h;
  const Mat cov = precision.inverse();
  const Vec mean = cov * (sigma_inv * mu + h.transpose() * r_inv * e);
  return {mean, cov};
}

ModelParams random_params(int M, int dg, int da, int dc, Rng &rng) {
  ModelParams p = ModelParams::defaults(M, dg, da, dc, std::max(M, 1));
  p.transition = TransitionParams::zeros(M, std::max(M, 1), dc);
  Vec th = rnd(p.transition.num_parameters(), 1, rng, 0.5);
  p.transition.unpack(th);
  for (int m = 0; m < M; ++m) {
    p.A_g[m] = 0.9 * Mat::Identity(dg, dg) + rnd(dg, dg, rng, 0.05);
    p.Q_g[m] = 0.1 * spd(dg, rng);
    p.A_u[m] = 0.95 * Mat::Identity(da, da);
    p.Q_u[m] = 0.05 * spd(da, rng);
  }
  return p;
}

void add_expert(ModelParams &p, ExpertId k, Rng &rng, double loading_scale = 0.7) {
  ExpertParams e;
  e.loading = rnd(p.d_alpha, p.d_g, rng, loading_scale);
  for (int m = 0; m < p.num_regimes; ++m) e.noise.push_back(scalar(0.5 + 0.1 * m));
  p.experts[k] = e;
}

} // namespace

// ---------------------------------------------------------------- regime prediction / mixing

TEST(Imm, IdentityTransitionKeepsWeights) {
  const auto pr = imm::predict_regime_weights((Vec(2) << 1.0, 0.0).finished(), Mat::Identity(2, 2), 1e-6);
  EXPECT_NEAR(pr.weights(0), 1.0, 1e-5);
}

TEST(Imm, UniformTransitionGivesUniformWeights) {
  const auto pr = imm::predict_regime_weights((Vec(3) << 0.2, 0.5, 0.3).finished(), Mat::Constant(3, 3, 1.0 / 3), 1e-6);
  EXPECT_TRUE(pr.weights.isApprox(Vec::Constant(3, 1.0 / 3), 1e-14));
}

TEST(Imm, HandComputedPredictiveWeights) {
  Mat pi(2, 2);
  pi << 0.9, 0.1, 0.2, 0.8;
  const auto pr = imm::predict_regime_weights((Vec(2) << 0.3, 0.7).finished(), pi, 1e-6);
  EXPECT_NEAR(pr.weights(0), 0.41, 1e-12);
  EXPECT_NEAR(pr.weights(1), 0.59, 1e-12);
  // w_{ℓ|m} = w_ℓ Π_ℓm / c_m
  EXPECT_NEAR(pr.mixing(0, 0), 0.27 / 0.41, 1e-12);
  EXPECT_NEAR(pr.mixing(1, 1), 0.56 / 0.59, 1e-12);
  EXPECT_NEAR(pr.mixing.col(0).sum(), 1.0, 1e-14);
}

TEST(Imm, MixingMomentCases) {
  Rng rng(1);
  const GaussianBelief b = rnd_belief(2, rng);
  const auto same = imm::mix_beliefs({b, b}, Mat::Constant(2, 2, 0.5));
  EXPECT_TRUE(same[0].mean.isApprox(b.mean, 1e-14));
  EXPECT_TRUE(same[1].cov.isApprox(b.cov, 1e-14));

  const GaussianBelief c = rnd_belief(2, rng);
  Mat point = Mat::Zero(2, 2);
  point(1, 0) = point(1, 1) = 1.0;
  const auto pm = imm::mix_beliefs({b, c}, point);
  EXPECT_TRUE(pm[0].mean.isApprox(c.mean, 1e-14));
  EXPECT_TRUE(pm[0].cov.isApprox(c.cov, 1e-14));

  const auto two = imm::mix_beliefs({{Vec::Zero(1), scalar(1)}, {Vec::Constant(1, 2), scalar(1)}},
                                    Mat::Constant(2, 2, 0.5));
  EXPECT_NEAR(two[0].mean(0), 1.0, 1e-15);
  EXPECT_NEAR(two[0].cov(0, 0), 2.0, 1e-15);
}

TEST(Imm, TimeUpdateCases) {
  Rng rng(2);
  const GaussianBelief b = rnd_belief(3, rng);
  const auto same = imm::time_update(b, Mat::Identity(3, 3), Mat::Zero(3, 3));
  EXPECT_TRUE(same.mean.isApprox(b.mean, 1e-15));
  EXPECT_TRUE(same.cov.isApprox(b.cov, 1e-15));
  const auto s = imm::time_update({Vec::Constant(1, 2), scalar(4)}, scalar(0.5), scalar(1));
  EXPECT_NEAR(s.mean(0), 1.0, 1e-15);
  EXPECT_NEAR(s.cov(0, 0), 2.0, 1e-15);
  const auto q = imm::time_update(b, Mat::Zero(3, 3), 0.1 * Mat::Identity(3, 3));
  EXPECT_GT(linalg::min_eigenvalue(q.cov), 0.0);
}

// ---------------------------------------------------------------- queried correction

TEST(Imm, ScalarHandKalman) {
  const auto j = imm::joint_update({Vec::Zero(1), scalar(1)}, {Vec::Zero(1), scalar(1)}, scalar(1), scalar(1),
                                   scalar(1), Vec::Constant(1, 3.0));
  EXPECT_NEAR(j.innovation_cov(0, 0), 3.0, 1e-15);
  EXPECT_NEAR(j.mean(0), 1.0, 1e-15);
  EXPECT_NEAR(j.mean(1), 1.0, 1e-15);
  EXPECT_NEAR(j.cov(0, 0), 2.0 / 3, 1e-15);
  EXPECT_NEAR(j.cov(0, 1), -1.0 / 3, 1e-15);
  EXPECT_NEAR(j.cov(1, 1), 2.0 / 3, 1e-15);
  // −Σ_g H_gᵀ S⁻¹ H_u Σ_u = −1·1·(1/3)·1·1
  const auto ex = imm::exact_joint_correct({Vec::Zero(1), scalar(1)}, {Vec::Zero(1), scalar(1)}, scalar(1),
                                           scalar(1), scalar(1), Vec::Constant(1, 3.0));
  EXPECT_NEAR(ex.cov(0, 1), -1.0 / 3, 1e-15);
}

TEST(Imm, UninformativeObservationLeavesPriors) {
  Rng rng(4);
  const auto g = rnd_belief(2, rng), u = rnd_belief(2, rng);
  const auto j = imm::joint_update(g, u, rnd(2, 1, rng), rnd(2, 2, rng), scalar(1e6), Vec::Constant(1, 2.0));
  EXPECT_LT((j.mean.head(2) - g.mean).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT((j.mean.tail(2) - u.mean).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Imm, ZeroLoadingDecouplesCrossBlock) {
  Rng rng(5);
  const auto ex = imm::exact_joint_correct(rnd_belief(2, rng), rnd_belief(3, rng), rnd(3, 1, rng), Mat::Zero(3, 2),
                                           scalar(0.4), Vec::Constant(1, 1.5));
  EXPECT_EQ(ex.cov.topRightCorner(2, 3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Imm, BruteForceConditioningProperty) {
  Rng rng(6);
  for (int rep = 0; rep < 100; ++rep) {
    const int dg = 1 + rep % 3, da = 1 + (rep / 3) % 3;
    const auto g = rnd_belief(dg, rng), u = rnd_belief(da, rng);
    const Mat phi = rnd(da, 1, rng), b = rnd(da, dg, rng), r = scalar(0.2 + 0.5 * (rep % 4));
    const Vec e = rnd(1, 1, rng, 2.0);
    const auto j = imm::joint_update(g, u, phi, b, r, e);
    Vec mu(dg + da);
    mu << g.mean, u.mean;
    Mat sigma = Mat::Zero(dg + da, dg + da);
    sigma.topLeftCorner(dg, dg) = g.cov;
    sigma.bottomRightCorner(da, da) = u.cov;
    Mat h(1, dg + da);
    h << phi.transpose() * b, phi.transpose();
    const auto [m_ref, c_ref] = information_form_posterior(mu, sigma, h, r, e);
    EXPECT_LT((j.mean - m_ref).cwiseAbs().maxCoeff(), 1e-8) << rep;
    EXPECT_LT((j.cov - c_ref).cwiseAbs().maxCoeff(), 1e-8) << rep;
    const Mat expected_cross = -g.cov * (phi.transpose() * b).transpose() * j.innovation_cov.inverse() *
                               phi.transpose() * u.cov;
    EXPECT_LT((j.cov.topRightCorner(dg, da) - expected_cross).cwiseAbs().maxCoeff(), 1e-10) << rep;
    // Posterior variance along the observed direction never exceeds the prior.
    EXPECT_LE((h * j.cov * h.transpose())(0, 0), (h * sigma * h.transpose())(0, 0) + 1e-10);
  }
}

TEST(Imm, JosephFormAgreesWithGainForm) {
  Rng rng(8);
  const auto g = rnd_belief(2, rng), u = rnd_belief(2, rng);
  const Mat phi = rnd(2, 1, rng), b = rnd(2, 2, rng);
  const auto a = imm::joint_update(g, u, phi, b, scalar(0.3), Vec::Constant(1, 0.7), false);
  const auto c = imm::joint_update(g, u, phi, b, scalar(0.3), Vec::Constant(1, 0.7), true);
  EXPECT_LT((a.cov - c.cov).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Imm, IdenticalModesKeepWeights) {
  ModelParams p = ModelParams::defaults(2, 1, 1, 1, 2);
  p.experts[0] = ExpertParams{Mat::Identity(1, 1), {scalar(1), scalar(1)}, 0.0};
  SldsFilter f(p, FeatureMap::identity_pad(1, 1));
  f.begin_round(1, Vec::Ones(1), {0});
  const Vec w = f.state().weights;
  f.correct(0, Vec::Constant(1, 2.5));
  EXPECT_LT((f.state().weights - w).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Imm, WeightNormalizationAndFloorProperty) {
  Rng rng(9);
  const double eps = 1e-6;
  for (int rep = 0; rep < 30; ++rep) {
    const int M = 2 + rep % 3;
    ModelParams p = random_params(M, 1, 2, 2, rng);
    for (int m = 0; m < M; ++m) p.birth_prior[m].mean = Vec::Constant(2, 3.0 * m);
    for (ExpertId k = 0; k < 3; ++k) add_expert(p, k, rng);
    SldsFilter f(p, FeatureMap::identity_pad(2, 2), FilterConfig{eps, false});
    for (int t = 1; t <= 40; ++t) {
      f.begin_round(t, rnd(2, 1, rng), {0, 1, 2});
      f.correct(t % 3, rnd(1, 1, rng, 5.0));
      const Vec &w = f.state().weights;
      EXPECT_NEAR(w.sum(), 1.0, 1e-10);
      EXPECT_GE(w.minCoeff(), eps / (1 + M * eps) - 1e-18);
    }
  }
}

// ---------------------------------------------------------------- factorized-belief propositions

TEST(Imm, InformationTransferCriterion) {
  Rng rng(10);
  for (int rep = 0; rep < 20; ++rep) {
    ModelParams p = random_params(1, 2, 2, 2, rng);
    add_expert(p, 0, rng);
    add_expert(p, 1, rng);
    p.experts[1].loading.setZero(); // j = 1 decoupled
    SldsFilter f(p, FeatureMap::identity_pad(2, 2));
    const Vec x = rnd(2, 1, rng);
    f.begin_round(1, x, {0, 1});
    const Vec before = imm::predictive_residual_mean(f.state(), f.phi(), 1);
    const Vec e = imm::predictive_residual_mean(f.state(), f.phi(), 0) + Vec::Constant(1, 3.0);
    f.correct(0, e);
    EXPECT_LT((imm::predictive_residual_mean(f.state(), f.phi(), 1) - before).cwiseAbs().maxCoeff(), 1e-12);

    p.experts[1].loading = rnd(2, 2, rng);
    SldsFilter c(p, FeatureMap::identity_pad(2, 2));
    c.begin_round(1, x, {0, 1});
    const Vec b2 = imm::predictive_residual_mean(c.state(), c.phi(), 1);
    const Vec h0 = c.phi().transpose() * c.state().expert(0).loading;
    const Vec h1 = c.phi().transpose() * c.state().expert(1).loading;
    if (std::abs(h0.dot(c.state().g[0].cov * h1)) < 1e-3) continue; // coupling invisible along Φ
    const Vec e2 = imm::predictive_residual_mean(c.state(), c.phi(), 0) + Vec::Constant(1, 1.0);
    c.correct(0, e2);
    EXPECT_GT((imm::predictive_residual_mean(c.state(), c.phi(), 1) - b2).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Imm, BirthCouplingThroughSharedFactor) {
  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    const int M = 1 + rep % 3, dg = 1 + rep % 2, da = 1 + rep % 3;
    ModelParams p = random_params(M, dg, da, 2, rng);
    for (ExpertId k = 0; k < 3; ++k) add_expert(p, k, rng);
    SldsFilter f(p, FeatureMap::identity_pad(2, da));
    f.begin_round(1, rnd(2, 1, rng), {0, 1});
    f.correct(0, rnd(1, 1, rng));
    f.begin_round(2, rnd(2, 1, rng), {0, 1, 2}); // expert 2 is born now
    const auto &st = f.state();
    for (int m = 0; m < M; ++m) {
      for (ExpertId j : {0, 1}) {
        const ExpertState &ej = st.expert(j), &ek = st.expert(2);
        // Stack (g, u_j, u_k) and map to (α_j, α_k) = L s.
        Mat l = Mat::Zero(2 * da, dg + 2 * da);
        l.block(0, 0, da, dg) = ej.loading;
        l.block(0, dg, da, da).setIdentity();
        l.block(da, 0, da, dg) = ek.loading;
        l.block(da, dg + da, da, da).setIdentity();
        Mat s = Mat::Zero(dg + 2 * da, dg + 2 * da);
        s.block(0, 0, dg, dg) = st.g[m].cov;
        s.block(dg, dg, da, da) = ej.u[m].cov;
        s.block(dg + da, dg + da, da, da) = ek.u[m].cov;
        const Mat joint = l * s * l.transpose();
        const Mat cross = imm::reliability_cross_covariance(st, m, j, 2);
        EXPECT_LT((joint.topRightCorner(da, da) - cross).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((cross - ej.loading * st.g[m].cov * ek.loading.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      }
    }
  }
}

// ---------------------------------------------------------------- registry

TEST(Registry, PruneAndEnterSetAlgebra) {
  auto upd = registry::update_registry(ExpertSet{1, 2}, ExpertSet{2, 3}, [](ExpertId k) { return k == 1 ? 0 : 90; },
                                       100, 50);
  EXPECT_EQ(upd.active, (ExpertSet{2, 3}));
  EXPECT_EQ(upd.pruned, (ExpertSet{1}));
  EXPECT_EQ(upd.entering, (ExpertSet{3}));
}

TEST(Registry, SteadyState) {
  auto upd = registry::update_registry(ExpertSet{0, 1, 2}, ExpertSet{0, 2}, [](ExpertId) { return 95; }, 100, 50);
  EXPECT_EQ(upd.active, (ExpertSet{0, 1, 2}));
  EXPECT_TRUE(upd.pruned.empty());
  EXPECT_TRUE(upd.entering.empty());
}

TEST(Registry, EmptyAvailableSetIsProtocolError) {
  EXPECT_THROW(registry::update_registry(ExpertSet{0}, ExpertSet{}, [](ExpertId) { return 0; }, 1, 5), ProtocolError);
}

TEST(Registry, SetInvariantsProperty) {
  Rng rng(13);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> tau(0, 100);
  for (int rep = 0; rep < 500; ++rep) {
    ExpertSet prev, avail;
    for (int k = 0; k < 8; ++k) {
      if (coin(rng)) prev.push_back(k);
      if (coin(rng)) avail.push_back(k);
    }
    if (avail.empty()) avail.push_back(0);
    std::vector<int> taus(8);
    for (auto &v : taus) v = tau(rng);
    const auto upd = registry::update_registry(prev, avail, [&](ExpertId k) { return taus[k]; }, 100, 40);
    for (ExpertId k : avail) EXPECT_TRUE(std::binary_search(upd.active.begin(), upd.active.end(), k));
    EXPECT_LE(upd.active.size(), prev.size() + avail.size());
  }
}

TEST(Registry, BirthPropagatesPrior) {
  ModelParams p = ModelParams::defaults(1, 1, 1, 1, 1);
  p.birth_prior[0] = {Vec::Constant(1, 2.0), scalar(4.0)};
  p.A_u[0] = scalar(0.5);
  p.Q_u[0] = scalar(1.0);
  FilterState s;
  s.weights = Vec::Ones(1);
  s.g = p.prior_g;
  const auto ex = registry::birth_expert(s, 0, p, RegistryPolicy{});
  EXPECT_NEAR(ex.u[0].mean(0), 1.0, 1e-15);
  EXPECT_NEAR(ex.u[0].cov(0, 0), 2.0, 1e-15);
  EXPECT_EQ(ex.loading.norm(), 0.0);
  EXPECT_EQ(ex.tau_last, 0);

  ModelParams q = ModelParams::defaults(1, 1, 1, 1, 1);
  q.Q_u[0] = Mat::Zero(1, 1);
  FilterState s2;
  s2.weights = Vec::Ones(1);
  const auto e2 = registry::birth_expert(s2, 3, q, RegistryPolicy{});
  EXPECT_TRUE(e2.u[0].cov.isApprox(q.birth_prior[0].cov));
  EXPECT_THROW(registry::birth_expert(s2, 3, q, RegistryPolicy{}), RegistryError);
}

TEST(Registry, DefaultNoiseIsMeanOfRegistered) {
  FilterState s;
  s.weights = Vec::Ones(1);
  EXPECT_EQ(registry::default_noise(s, 1, 1)[0](0, 0), 1.0);
  s.registry[0].noise = {scalar(2.0)};
  s.registry[1].noise = {scalar(4.0)};
  EXPECT_EQ(registry::default_noise(s, 1, 1)[0](0, 0), 3.0);
}

TEST(Registry, PruneEmptyAndAvailableGuard) {
  FilterState s;
  s.weights = Vec::Ones(1);
  s.registry[0] = ExpertState{};
  registry::prune_experts(s, {}, {0});
  EXPECT_EQ(s.registry.size(), 1u);
  EXPECT_THROW(registry::prune_experts(s, {0}, {0}), RegistryError);
}

TEST(Registry, ReentryReinitializes) {
  Rng rng(14);
  ModelParams p = random_params(2, 1, 1, 1, rng);
  add_expert(p, 0, rng);
  add_expert(p, 1, rng);
  RegistryPolicy rp;
  rp.delta_max = 3;
  SldsFilter f(p, FeatureMap::identity_pad(1, 1), {}, rp);
  f.begin_round(1, Vec::Ones(1), {0, 1});
  f.correct(1, Vec::Constant(1, 2.0));
  for (int t = 2; t <= 6; ++t) {
    f.begin_round(t, Vec::Ones(1), {0});
    f.correct(0, Vec::Constant(1, 0.5));
  }
  EXPECT_EQ(f.state().registry.count(1), 0u);
  // A fresh filter that has only ever seen expert 0 gives the birth belief for comparison.
  FilterState probe = f.state();
  probe.registry.erase(0);
  const auto fresh = registry::birth_expert(probe, 1, p, rp);
  f.begin_round(7, Vec::Ones(1), {0, 1});
  const auto &e1 = f.state().expert(1);
  for (int m = 0; m < 2; ++m) {
    EXPECT_TRUE(e1.u[m].mean.isApprox(fresh.u[m].mean, 1e-15));
    EXPECT_TRUE(e1.u[m].cov.isApprox(fresh.u[m].cov, 1e-15));
  }
  bool reentry = false;
  for (const auto &ev : f.events()) reentry = reentry || (ev.kind == "reentry" && ev.expert == 1 && ev.t == 7);
  EXPECT_TRUE(reentry);
}

TEST(Registry, PruningInvarianceProperty) {
  Rng rng(15);
  for (int ep = 0; ep < 20; ++ep) {
    const int M = 1 + ep % 3;
    ModelParams p = random_params(M, 1, 2, 2, rng);
    for (ExpertId k = 0; k < 5; ++k) add_expert(p, k, rng);
    RegistryPolicy keep, prune;
    keep.delta_max = 1000000;
    prune.delta_max = 5;
    SldsFilter a(p, FeatureMap::identity_pad(2, 2), {}, keep), b(p, FeatureMap::identity_pad(2, 2), {}, prune);
    int prunes = 0;
    for (int t = 1; t <= 200; ++t) {
      ExpertSet avail{0, 1};
      if (t < 20) avail = {0, 1, 2, 3, 4}; // 2..4 go stale afterwards
      const Vec x = rnd(2, 1, rng);
      a.begin_round(t, x, avail);
      const auto ub = b.begin_round(t, x, avail);
      prunes += static_cast<int>(ub.pruned.size());
      for (ExpertId k : {0, 1}) {
        for (int m = 0; m < M; ++m) {
          const auto ma = imm::predictive_moments(a.state(), a.phi(), m, k);
          const auto mb = imm::predictive_moments(b.state(), b.phi(), m, k);
          EXPECT_LE((ma.mean - mb.mean).cwiseAbs().maxCoeff(), 1e-12);
          EXPECT_LE((ma.cov - mb.cov).cwiseAbs().maxCoeff(), 1e-12);
        }
      }
      const ExpertId q = t < 20 ? t % 5 : t % 2;
      const Vec e = rnd(1, 1, rng);
      a.correct(q, e);
      b.correct(q, e);
    }
    EXPECT_EQ(prunes, 3);
  }
}

// ---------------------------------------------------------------- router

TEST(Router, PredictedCostCases) {
  FilterState s;
  s.weights = Vec::Ones(1);
  s.g = {GaussianBelief::standard(1, 0.0)};
  ExpertState e;
  e.u = {{Vec::Zero(1), scalar(0.0)}};
  e.loading = Mat::Zero(1, 1);
  e.noise = {scalar(2.5)};
  s.registry[0] = e;
  const Mat phi = Mat::Identity(1, 1);
  EXPECT_NEAR(router::predicted_costs(s, phi, {0}).at(0), 2.5, 1e-15);
  s.registry[0].fee = 1.0;
  EXPECT_NEAR(router::predicted_costs(s, phi, {0}).at(0), 3.5, 1e-15);
}

TEST(Router, GapCases) {
  const auto g = router::gaps({{0, 3.0}, {1, 5.0}, {2, 4.0}});
  EXPECT_EQ(g.at(0), 0.0);
  EXPECT_EQ(g.at(1), 2.0);
  EXPECT_EQ(g.at(2), 1.0);
  const auto e = router::gaps({{0, 1.0}, {1, 1.0}});
  EXPECT_EQ(e.at(1), 0.0);
  EXPECT_EQ(router::gaps({{4, 9.0}}).at(4), 0.0);
}

TEST(Router, SharedFactorIgClosedForm) {
  const double v = router::ig_shared_factor(Vec::Ones(1), {scalar(1)}, {scalar(1)}, {scalar(1)});
  EXPECT_NEAR(v, 0.5 * std::log(2.0), 1e-12);
  EXPECT_EQ(router::ig_shared_factor(Vec::Ones(1), {scalar(0)}, {scalar(1)}, {scalar(1)}), 0.0);
  EXPECT_EQ(router::ig_shared_factor(Vec::Ones(1), {scalar(1)}, {scalar(0)}, {scalar(1)}), 0.0);
}

TEST(Router, SharedFactorIgNonNegativeProperty) {
  Rng rng(16);
  for (int rep = 0; rep < 200; ++rep) {
    const int M = 1 + rep % 3, dg = 1 + rep % 2;
    Vec w = rnd(M, 1, rng).cwiseAbs();
    w /= w.sum();
    std::vector<Mat> h, sg, sc;
    for (int m = 0; m < M; ++m) {
      h.push_back(rnd(1, dg, rng));
      sg.push_back(spd(dg, rng));
      sc.push_back(scalar(0.1 + std::abs(rnd(1, 1, rng)(0))));
    }
    EXPECT_GE(router::ig_shared_factor(w, h, sg, sc), 0.0);
  }
}

TEST(Router, ModeIdentificationCases) {
  Rng rng(17);
  std::vector<EmissionMoments> one{{Vec::Zero(1), scalar(1)}};
  EXPECT_EQ(router::ig_mode_identification(Vec::Ones(1), one, 100, rng), 0.0);
  std::vector<EmissionMoments> same{{Vec::Zero(1), scalar(1)}, {Vec::Zero(1), scalar(1)}};
  EXPECT_NEAR(router::ig_mode_identification((Vec(2) << 0.3, 0.7).finished(), same, 1000, rng), 0.0, 1e-12);
  std::vector<EmissionMoments> far{{Vec::Constant(1, -10), scalar(1)}, {Vec::Constant(1, 10), scalar(1)}};
  EXPECT_NEAR(router::ig_mode_identification(Vec::Constant(2, 0.5), far, 10000, rng), std::log(2.0), 0.02);
}

TEST(Router, ModeIdentificationMatchesQuadratureProperty) {
  Rng rng(18);
  std::uniform_real_distribution<double> u(0.1, 0.9), mu(-2.0, 2.0), sd(0.5, 2.0);
  for (int rep = 0; rep < 10; ++rep) {
    const double w0 = u(rng);
    const Vec w = (Vec(2) << w0, 1 - w0).finished();
    const double m0 = mu(rng), m1 = mu(rng), s0 = sd(rng), s1 = sd(rng);
    std::vector<EmissionMoments> mo{{Vec::Constant(1, m0), scalar(s0 * s0)}, {Vec::Constant(1, m1), scalar(s1 * s1)}};
    auto pdf = [](double x, double m, double s) {
      return std::exp(-0.5 * (x - m) * (x - m) / (s * s)) / (s * std::sqrt(2 * M_PI));
    };
    // I(z; E) = Σ_m w_m ∫ p_m log(p_m / p_mix), trapezoid on a wide grid.
    double oracle = 0.0;
    const double lo = -20.0, hi = 20.0;
    const int n = 40000;
    for (int i = 0; i <= n; ++i) {
      const double x = lo + (hi - lo) * i / n;
      const double p0 = pdf(x, m0, s0), p1 = pdf(x, m1, s1), pm = w(0) * p0 + w(1) * p1;
      double f = 0.0;
      if (p0 > 0) f += w(0) * p0 * std::log(p0 / pm);
      if (p1 > 0) f += w(1) * p1 * std::log(p1 / pm);
      oracle += (i == 0 || i == n ? 0.5 : 1.0) * f * (hi - lo) / n;
    }
    // Standard error from 10 independent replicates.
    std::vector<double> reps;
    for (int r = 0; r < 10; ++r) reps.push_back(router::ig_mode_identification(w, mo, 10000, rng));
    double mean = 0.0, var = 0.0;
    for (double v : reps) mean += v / reps.size();
    for (double v : reps) var += (v - mean) * (v - mean) / (reps.size() - 1);
    const double se = std::sqrt(var / reps.size());
    EXPECT_NEAR(mean, oracle, 3 * se + 1e-4) << rep;
  }
}

TEST(Router, IdsArithmetic) {
  std::vector<ExpertScore> s(3);
  const double gap[3] = {0, 1, 2}, ig[3] = {0.1, 2.0, 9.5};
  for (int k = 0; k < 3; ++k) {
    s[k].expert = k;
    s[k].gap = gap[k];
    s[k].ig_total = ig[k];
  }
  EXPECT_EQ(router::select_ids(s, 1e-10, 1.0), 2);
  EXPECT_NEAR(s[0].ratio, 10.0, 1e-12);
  EXPECT_NEAR(s[1].ratio, 2.0, 1e-12);
  EXPECT_NEAR(s[2].ratio, 9.0 / 9.5, 1e-12);
}

TEST(Router, DeltaZeroSelectsMyopicAndTieBreaks) {
  std::vector<ExpertScore> s(3);
  for (int k = 0; k < 3; ++k) {
    s[k].expert = k;
    s[k].gap = k == 1 ? 0.0 : 0.5 * k + 0.1;
    s[k].ig_total = 5.0 - k;
  }
  EXPECT_EQ(router::select_ids(s, 1e-10, 0.0), 1);
  std::vector<ExpertScore> t(3);
  for (int k = 0; k < 3; ++k) {
    t[k].expert = k;
    t[k].gap = 0.0;
    t[k].ig_total = k == 2 ? 1.0 : 0.5;
  }
  EXPECT_EQ(router::select_ids(t, 1e-10, 0.0), 2); // higher IG wins the tie
  t[2].ig_total = 0.5;
  EXPECT_EQ(router::select_ids(t, 1e-10, 0.0), 0); // then lowest id
  std::vector<ExpertScore> single(1);
  single[0].expert = 7;
  EXPECT_EQ(router::select_ids(single, 1e-10, 0.3), 7);
}

TEST(Router, FeeShiftInvariance) {
  Rng rng(19);
  ModelParams p = random_params(2, 1, 1, 1, rng);
  for (ExpertId k = 0; k < 3; ++k) add_expert(p, k, rng);
  ModelParams q = p;
  for (auto &[_, e] : q.experts) e.fee += 2.0;
  SldsFilter a(p, FeatureMap::identity_pad(1, 1)), b(q, FeatureMap::identity_pad(1, 1));
  for (int t = 1; t <= 30; ++t) {
    const Vec x = rnd(1, 1, rng);
    a.begin_round(t, x, {0, 1, 2});
    b.begin_round(t, x, {0, 1, 2});
    Rng r1 = derive_rng(1, "ig", t), r2 = derive_rng(1, "ig", t);
    const auto sa = router::route(a.state(), a.phi(), {0, 1, 2}, RouterConfig{}, r1);
    const auto sb = router::route(b.state(), b.phi(), {0, 1, 2}, RouterConfig{}, r2);
    EXPECT_EQ(sa.chosen, sb.chosen);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(sa.experts[k].gap, sb.experts[k].gap, 1e-12);
    const Vec e = rnd(1, 1, rng);
    a.correct(sa.chosen, e);
    b.correct(sa.chosen, e);
  }
}

TEST(Router, ChainRuleDecomposition) {
  Rng rng(20);
  ModelParams p = random_params(1, 1, 1, 1, rng);
  add_expert(p, 0, rng);
  SldsFilter f(p, FeatureMap::identity_pad(1, 1));
  f.begin_round(1, Vec::Ones(1), {0});
  Rng r = derive_rng(2, "ig", 1);
  const auto sc = router::route(f.state(), f.phi(), {0}, RouterConfig{}, r);
  EXPECT_EQ(sc.experts[0].ig_mode, 0.0);
  EXPECT_EQ(sc.experts[0].ig_total, std::max(sc.experts[0].ig_factor, 1e-10));
}

TEST(Router, ZeroLoadingsGiveZeroSharedFactorIg) {
  Rng rng(21);
  ModelParams p = random_params(2, 2, 2, 2, rng);
  for (ExpertId k = 0; k < 3; ++k) {
    add_expert(p, k, rng);
    p.experts[k].loading.setZero();
  }
  SldsFilter f(p, FeatureMap::identity_pad(2, 2));
  for (int t = 1; t <= 20; ++t) {
    f.begin_round(t, rnd(2, 1, rng), {0, 1, 2});
    for (ExpertId k = 0; k < 3; ++k) EXPECT_EQ(router::ig_shared_factor(f.state(), f.phi(), k), 0.0);
    f.correct(t % 3, rnd(1, 1, rng));
  }
}

TEST(SldsFilter, ProtocolErrors) {
  ModelParams p = ModelParams::defaults(1, 1, 1, 1, 1);
  SldsFilter f(p, FeatureMap::identity_pad(1, 1));
  EXPECT_THROW(f.begin_round(1, Vec::Ones(1), {}), ProtocolError);
  f.begin_round(2, Vec::Ones(1), {0});
  EXPECT_THROW(f.begin_round(2, Vec::Ones(1), {0}), ProtocolError);
  EXPECT_THROW(f.correct(5, Vec::Ones(1)), RegistryError);
  EXPECT_THROW(SldsFilter(p, FeatureMap::identity_pad(2, 1)), ConfigError);
}
