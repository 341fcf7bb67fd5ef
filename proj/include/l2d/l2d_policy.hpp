#pragma once

#include "l2d/common.hpp"
#include "l2d/learning.hpp"
#include "l2d/policy.hpp"
#include "l2d/rng.hpp"
#include "l2d/router.hpp"
#include "l2d/slds_filter.hpp"

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace l2d {

struct L2dOptions {
  RouterConfig router;
  EmConfig em;
  bool em_warmup = false; // one offline EM fit on the warmup rounds
  bool em_online = false; // sliding-window EM
  int warmup = 100;
  std::uint64_t seed = 0;
};

struct EmLogEntry {
  int round = 0;        // policy round count when the fit ran
  int window_first = 0; // t of first window round
  int window_last = 0;
  int iteration = 0;
  double objective = 0.0;
  double objective_se = 0.0;
  Vec occupancy;
  double norm_a_g = 0.0, norm_q_g = 0.0, norm_a_u = 0.0, norm_q_u = 0.0, norm_b = 0.0;
};

class L2dPolicy : public Policy {
public:
  L2dPolicy(std::string name, SldsFilter filter, L2dOptions opt)
      : name_(std::move(name)), filter_(std::move(filter)), opt_(opt), em_rng_(derive_rng(opt.seed, "em")) {
    opt_.em.validate();
    if (opt_.em_online || opt_.em_warmup) {
      states_.push_back(filter_.state());
    }
  }

  std::string name() const override { return name_; }

  ExpertId select(const DecisionContext &ctx) override {
    filter_.begin_round(ctx.t, ctx.x, ctx.available);
    Rng ig_rng = derive_rng(opt_.seed, "ig", static_cast<std::uint64_t>(ctx.t));
    scores_ = router::route(filter_.state(), filter_.phi(), ctx.available, opt_.router, ig_rng);
    predictive_weights_ = filter_.state().weights;
    residual_means_.clear();
    for (const auto &[k, _] : filter_.state().registry) {
      residual_means_[k] = imm::predictive_residual_mean(filter_.state(), filter_.phi(), k)(0);
    }
    g_mean_ = Vec::Zero(filter_.params().d_g);
    g_var_ = Vec::Zero(filter_.params().d_g);
    const auto &st = filter_.state();
    for (int m = 0; m < st.num_regimes(); ++m) g_mean_ += st.weights(m) * st.g[m].mean;
    for (int m = 0; m < st.num_regimes(); ++m) {
      const Vec d = st.g[m].mean - g_mean_;
      g_var_ += st.weights(m) * (st.g[m].cov.diagonal() + d.cwiseProduct(d));
    }
    return scores_.chosen;
  }

  void update(const DecisionContext &ctx, const Feedback &fb) override {
    const Vec e = fb.prediction - fb.target;
    filter_.correct(fb.queried, e);
    ++rounds_;
    if (!(opt_.em_online || opt_.em_warmup)) {
      return;
    }
    history_.push_back({WindowRound{ctx.t, ctx.x, filter_.phi(), fb.queried, e}, ctx.available});
    states_.push_back(filter_.state());
    if (opt_.em_warmup && !warm_fit_done_ && rounds_ == opt_.warmup) {
      warm_fit_done_ = true;
      warmup_fit();
    }
    if (opt_.em_online && learning::online_update_due(rounds_, opt_.em)) {
      online_fit();
    }
    trim();
  }

  PolicyDiagnostics diagnostics() const override {
    PolicyDiagnostics d;
    for (const auto &s : scores_.experts) {
      d.predicted_cost[s.expert] = s.predicted_cost;
      d.gap[s.expert] = s.gap;
      d.ig_mode[s.expert] = s.ig_mode;
      d.ig_factor[s.expert] = s.ig_factor;
      d.ratio[s.expert] = s.ratio;
    }
    d.residual_mean = residual_means_;
    d.regime_weights = predictive_weights_;
    d.g_mean = g_mean_;
    d.g_var = g_var_;
    return d;
  }

  const SldsFilter &filter() const { return filter_; }
  const RoutingScores &last_scores() const { return scores_; }
  const std::vector<EmLogEntry> &em_log() const { return em_log_; }

private:
  struct HistoryRound {
    WindowRound round;
    ExpertSet available;
  };

  ModelParams params_with_registry() const {
    ModelParams p = filter_.params();
    for (const auto &[k, ex] : filter_.state().registry) {
      p.experts[k] = ExpertParams{ex.loading, ex.noise, ex.fee};
    }
    return p;
  }

  void log_fit(int first, int last, const EmTrace &trace, const ModelParams &p) {
    for (size_t i = 0; i < trace.objective.size(); ++i) {
      EmLogEntry e;
      e.round = rounds_;
      e.window_first = first;
      e.window_last = last;
      e.iteration = static_cast<int>(i);
      e.objective = trace.objective[i];
      e.objective_se = trace.objective_se[i];
      e.occupancy = trace.occupancy[i];
      for (int m = 0; m < p.num_regimes; ++m) {
        e.norm_a_g += p.A_g[m].norm();
        e.norm_q_g += p.Q_g[m].norm();
        e.norm_a_u += p.A_u[m].norm();
        e.norm_q_u += p.Q_u[m].norm();
      }
      for (const auto &[_, ep] : p.experts) e.norm_b += ep.loading.norm();
      em_log_.push_back(std::move(e));
    }
  }

  /// Replay rounds [from, end) of history_ starting at states_[from] under `p`.
  void replay(size_t from, const ModelParams &p) {
    filter_.set_event_logging(false);
    filter_.set_state(states_[from]);
    filter_.set_params(p);
    for (size_t i = from; i < history_.size(); ++i) {
      const auto &h = history_[i];
      filter_.begin_round(h.round.t, h.round.x, h.available);
      filter_.correct(h.round.queried, h.round.residual);
      states_[i + 1] = filter_.state();
    }
    filter_.set_event_logging(true);
  }

  void warmup_fit() {
    std::vector<WindowRound> window;
    for (const auto &h : history_) window.push_back(h.round);
    ModelParams p = params_with_registry();
    EmTrace trace;
    const auto experts = learning::queried_experts(window);
    learning::ensure_expert_params(p, experts);
    const WindowPrior prior = learning::default_window_prior(p, experts);
    p = learning::run_mcem(window, p, opt_.em, opt_.em.n_em, em_rng_, prior, &trace);
    log_fit(window.front().t, window.back().t, trace, p);
    replay(0, p);
  }

  void online_fit() {
    const size_t w = static_cast<size_t>(opt_.em.window);
    if (history_.size() < w) {
      return;
    }
    const size_t from = history_.size() - w;
    std::vector<WindowRound> window;
    for (size_t i = from; i < history_.size(); ++i) window.push_back(history_[i].round);
    ModelParams p = params_with_registry();
    const auto experts = learning::queried_experts(window);
    learning::ensure_expert_params(p, experts);
    const WindowPrior prior =
        learning::window_prior_from_state(states_[from], p, window.front().x, experts, filter_.config().eps_w);
    EmTrace trace;
    p = learning::run_mcem(window, p, opt_.em, opt_.em.n_em_window, em_rng_, prior, &trace);
    log_fit(window.front().t, window.back().t, trace, p);
    replay(from, p);
  }

  void trim() {
    const size_t keep = opt_.em_online ? static_cast<size_t>(opt_.em.window) : 0;
    if (opt_.em_warmup && !warm_fit_done_) {
      return;
    }
    while (history_.size() > keep) {
      history_.pop_front();
      states_.pop_front();
    }
  }

  std::string name_;
  SldsFilter filter_;
  L2dOptions opt_;
  Rng em_rng_;
  RoutingScores scores_;
  Vec predictive_weights_, g_mean_, g_var_;
  std::map<ExpertId, double> residual_means_;
  int rounds_ = 0;
  bool warm_fit_done_ = false;
  std::deque<HistoryRound> history_;
  std::deque<FilterState> states_; // states_[i] = belief before history_[i]
  std::vector<EmLogEntry> em_log_;
};

} // namespace l2d
