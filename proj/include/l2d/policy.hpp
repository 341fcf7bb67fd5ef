#pragma once

#include "l2d/common.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace l2d {

/// Everything a policy may see before acting.
struct DecisionContext {
  int t = 0;
  Vec x;
  ExpertSet available;
};

/// Everything a policy may see after acting: only the queried expert's
/// prediction and the target.
struct Feedback {
  int t = 0;
  ExpertId queried = 0;
  Vec prediction;
  Vec target;
  double cost = 0.0;
};

/// Optional per-round diagnostics written to the round log.
struct PolicyDiagnostics {
  std::map<ExpertId, double> predicted_cost;
  std::map<ExpertId, double> gap;
  std::map<ExpertId, double> ig_mode;
  std::map<ExpertId, double> ig_factor;
  std::map<ExpertId, double> ratio;
  std::map<ExpertId, double> residual_mean; // model predictive residual mean (l2d)
  Vec regime_weights;
  Vec g_mean;
  Vec g_var;
};

/// Partial-feedback routing policy. `select` is called every round
/// (including warmup, where the harness may override the choice);
/// `update` receives feedback for the expert that was actually queried.
class Policy {
public:
  virtual ~Policy() = default;
  virtual std::string name() const = 0;
  virtual ExpertId select(const DecisionContext &ctx) = 0;
  virtual void update(const DecisionContext &ctx, const Feedback &fb) = 0;
  virtual PolicyDiagnostics diagnostics() const { return {}; }
};

/// Hindsight policy: sees every available expert's realized cost. Not a Policy.
class HindsightPolicy {
public:
  virtual ~HindsightPolicy() = default;
  virtual std::string name() const = 0;
  virtual ExpertId select(const DecisionContext &ctx, const std::map<ExpertId, double> &costs) = 0;
};

inline ExpertId round_robin(const ExpertSet &available, int warmup_index) {
  if (available.empty()) {
    throw ProtocolError("round_robin: empty available set");
  }
  ExpertSet s = available;
  std::sort(s.begin(), s.end());
  return s[static_cast<size_t>(warmup_index) % s.size()];
}

} // namespace l2d
