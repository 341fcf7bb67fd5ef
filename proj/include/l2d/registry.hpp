#pragma once

#include "l2d/common.hpp"
#include "l2d/imm_filter.hpp"
#include "l2d/model_core.hpp"
#include "l2d/rng.hpp"

#include <algorithm>
#include <optional>
#include <set>
#include <string>

namespace l2d {

struct RegistryPolicy {
  int delta_max = 500;
  enum class LoadingInit { zero, small_random };
  LoadingInit loading_init = LoadingInit::zero;
  double loading_scale = 0.1;

  void validate() const {
    if (delta_max < 1) {
      throw ConfigError("registry: delta_max must be >= 1");
    }
  }
};

struct RegistryUpdate {
  ExpertSet active;   // K_t
  ExpertSet pruned;   // K^stale_t
  ExpertSet entering; // E^init_t
};

/// Optional per-expert side information supplied on entry.
struct ExpertSideInfo {
  Mat loading;
  std::vector<Mat> noise;
  double fee = 0.0;
};

namespace registry {

inline ExpertSet sorted_unique(ExpertSet s) {
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

/// `tau_last(k)` must return the last queried round of k (0 if never).
template <class TauLast>
RegistryUpdate update_registry(const ExpertSet &known_prev, const ExpertSet &available, TauLast &&tau_last,
                               int t, int delta_max) {
  if (available.empty()) {
    throw ProtocolError("round " + std::to_string(t) + ": available expert set is empty");
  }
  const ExpertSet prev = sorted_unique(known_prev);
  const ExpertSet avail = sorted_unique(available);
  RegistryUpdate out;
  for (ExpertId k : prev) {
    if (!std::binary_search(avail.begin(), avail.end(), k) && t - tau_last(k) > delta_max) {
      out.pruned.push_back(k);
    }
  }
  std::set_union(prev.begin(), prev.end(), avail.begin(), avail.end(), std::back_inserter(out.active));
  ExpertSet kept;
  std::set_difference(out.active.begin(), out.active.end(), out.pruned.begin(), out.pruned.end(),
                      std::back_inserter(kept));
  out.active = std::move(kept);
  std::set_difference(avail.begin(), avail.end(), prev.begin(), prev.end(), std::back_inserter(out.entering));
  return out;
}

inline RegistryUpdate update_registry(const FilterState &state, const ExpertSet &available, int t, int delta_max) {
  ExpertSet prev;
  for (const auto &[k, _] : state.registry) {
    prev.push_back(k);
  }
  return update_registry(prev, available, [&](ExpertId k) { return state.expert(k).tau_last; }, t, delta_max);
}

/// Default emission noise for a new expert: mean of the registered experts' R[m], else identity.
inline std::vector<Mat> default_noise(const FilterState &state, int num_regimes, int d_y) {
  std::vector<Mat> r(num_regimes, Mat::Zero(d_y, d_y));
  if (state.registry.empty()) {
    for (auto &m : r) m = Mat::Identity(d_y, d_y);
    return r;
  }
  for (const auto &[_, ex] : state.registry) {
    for (int m = 0; m < num_regimes; ++m) r[m] += ex.noise[m];
  }
  for (auto &m : r) m /= static_cast<double>(state.registry.size());
  return r;
}

/// Create the predictive belief of entering expert j by propagating the
/// birth prior one step through the idiosyncratic dynamics.
inline ExpertState birth_expert(FilterState &state, ExpertId j, const ModelParams &params,
                                const RegistryPolicy &policy, Rng *rng = nullptr,
                                const ExpertSideInfo *side = nullptr) {
  if (state.registry.count(j) != 0) {
    throw RegistryError("birth: expert " + std::to_string(j) + " is already registered");
  }
  const int M = params.num_regimes;
  ExpertState ex;
  for (int m = 0; m < M; ++m) {
    ex.u.push_back(imm::time_update(params.birth_prior[m], params.A_u[m], params.Q_u[m]));
  }
  if (side != nullptr) {
    ex.loading = side->loading;
    ex.noise = side->noise;
    ex.fee = side->fee;
  } else if (auto it = params.experts.find(j); it != params.experts.end()) {
    ex.loading = it->second.loading;
    ex.noise = it->second.noise;
    ex.fee = it->second.fee;
  } else {
    ex.loading = Mat::Zero(params.d_alpha, params.d_g);
    if (policy.loading_init == RegistryPolicy::LoadingInit::small_random && params.d_g > 0) {
      if (rng == nullptr) {
        throw ConfigError("birth: small_random loading init needs an rng");
      }
      std::normal_distribution<double> nd(0.0, policy.loading_scale);
      for (Eigen::Index i = 0; i < ex.loading.size(); ++i) ex.loading.data()[i] = nd(*rng);
    }
    ex.noise = default_noise(state, M, params.d_y);
  }
  ex.tau_last = 0;
  state.registry.emplace(j, ex);
  return ex;
}

inline void prune_experts(FilterState &state, const ExpertSet &pruned, const ExpertSet &available) {
  for (ExpertId k : pruned) {
    if (std::find(available.begin(), available.end(), k) != available.end()) {
      throw RegistryError("prune: expert " + std::to_string(k) + " is available this round");
    }
    if (state.registry.erase(k) == 0) {
      throw RegistryError("prune: expert " + std::to_string(k) + " is not registered");
    }
  }
}

} // namespace registry
} // namespace l2d
