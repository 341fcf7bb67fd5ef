#pragma once

#include "l2d/common.hpp"
#include "l2d/imm_filter.hpp"
#include "l2d/model_core.hpp"
#include "l2d/registry.hpp"
#include "l2d/rng.hpp"
#include "l2d/transitions.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace l2d {

struct RegistryEvent {
  int t = 0;
  std::string kind; // birth | reentry | prune
  ExpertId expert = 0;
};

/// Round-level driver of the censored IMM recursion:
/// registry update → mixing → time update (+ birth) → [routing] → correct.
class SldsFilter {
public:
  SldsFilter(ModelParams params, FeatureMap fm, FilterConfig fcfg = {}, RegistryPolicy rpol = {},
             std::uint64_t seed = 0)
      : params_(std::move(params)), fm_(std::move(fm)), fcfg_(fcfg), rpol_(rpol),
        birth_rng_(derive_rng(seed, "birth")) {
    params_.validate();
    rpol_.validate();
    if (fm_.alpha_dim() != params_.d_alpha || fm_.context_dim() != params_.d_context) {
      throw ConfigError("feature map shape does not match (d_alpha, d_context)");
    }
    reset();
  }

  void reset() {
    state_ = FilterState{};
    state_.weights = params_.prior_z;
    state_.g = params_.prior_g;
    state_.t = 0;
    seen_.clear();
  }

  /// Steps 1–4 of a round. Leaves the predictive beliefs (w̄, g_{t|t−1}, u_{t|t−1}) in state().
  RegistryUpdate begin_round(int t, const Vec &x, const ExpertSet &available) {
    if (t <= state_.t) {
      throw ProtocolError("rounds must be strictly increasing (got " + std::to_string(t) + ")");
    }
    RegistryUpdate upd = registry::update_registry(state_, available, t, rpol_.delta_max);
    registry::prune_experts(state_, upd.pruned, available);
    for (ExpertId k : upd.pruned) {
      log_event({t, "prune", k});
    }

    const Mat pi = transitions::transition_matrix(params_.transition, x);
    const RegimePrediction pred = imm::predict_regime_weights(state_.weights, pi, fcfg_.eps_w);
    const int M = params_.num_regimes;
    const auto g_mixed = imm::mix_beliefs(state_.g, pred.mixing);
    for (int m = 0; m < M; ++m) {
      state_.g[m] = imm::time_update(g_mixed[m], params_.A_g[m], params_.Q_g[m]);
    }
    for (auto &[k, ex] : state_.registry) {
      const auto u_mixed = imm::mix_beliefs(ex.u, pred.mixing);
      for (int m = 0; m < M; ++m) {
        ex.u[m] = imm::time_update(u_mixed[m], params_.A_u[m], params_.Q_u[m]);
      }
    }
    for (ExpertId j : upd.entering) {
      registry::birth_expert(state_, j, params_, rpol_, &birth_rng_);
      log_event({t, seen_.count(j) ? "reentry" : "birth", j});
      seen_.insert(j);
    }
    state_.weights = pred.weights;
    state_.t = t;
    phi_ = fm_.apply(x);
    return upd;
  }

  /// Step 6: queried Kalman update with factorized projection. Returns per-mode log-likelihoods.
  Vec correct(ExpertId k, const Vec &residual) {
    return imm::correct_queried(state_, phi_, k, residual, fcfg_);
  }

  const FilterState &state() const { return state_; }
  FilterState &mutable_state() { return state_; }
  void set_state(FilterState s) { state_ = std::move(s); }
  const ModelParams &params() const { return params_; }
  const FeatureMap &feature_map() const { return fm_; }
  const FilterConfig &config() const { return fcfg_; }
  const RegistryPolicy &registry_policy() const { return rpol_; }
  const Mat &phi() const { return phi_; }
  const std::vector<RegistryEvent> &events() const { return events_; }
  void clear_events() { events_.clear(); }
  void set_event_logging(bool on) { log_events_ = on; }

  /// Install new parameters (after learning); per-expert B, R, β in the live
  /// registry are overwritten from params.experts where present.
  void set_params(ModelParams p) {
    p.validate();
    params_ = std::move(p);
    for (auto &[k, ex] : state_.registry) {
      if (auto it = params_.experts.find(k); it != params_.experts.end()) {
        ex.loading = it->second.loading;
        ex.noise = it->second.noise;
        ex.fee = it->second.fee;
      }
    }
  }

private:
  void log_event(RegistryEvent e) {
    if (log_events_) events_.push_back(std::move(e));
  }

  ModelParams params_;
  FeatureMap fm_;
  FilterConfig fcfg_;
  RegistryPolicy rpol_;
  Rng birth_rng_;
  FilterState state_;
  Mat phi_;
  std::set<ExpertId> seen_;
  std::vector<RegistryEvent> events_;
  bool log_events_ = true;
};

} // namespace l2d
