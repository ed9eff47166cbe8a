#pragma once

#include <string>

#include "aligndiff/contribution.hpp"
#include "aligndiff/random.hpp"

namespace aligndiff {

enum class StrategyKind { uniform, loss_scaling, prob_scaling };

std::string to_string(StrategyKind kind);
StrategyKind strategy_kind_from_string(const std::string& name);

/// Training-time timestep policy built from a contribution profile.
struct TimestepStrategy {
  StrategyKind kind = StrategyKind::uniform;
  ContributionProfile profile;

  static TimestepStrategy uniform(int T, int B = 10);
  static TimestepStrategy loss_scaling(ContributionProfile profile);
  static TimestepStrategy prob_scaling(ContributionProfile profile);

  int steps() const { return profile.steps(); }
};

/// Uniform over 1..T for uniform / loss_scaling; otherwise a group drawn from
/// the profile weights, then t uniform within that group.
int sample_timestep(const TimestepStrategy& strategy, Rng& rng);

/// B * c_b^2 for loss scaling (mean one under uniform t), else 1.
double loss_weight(const TimestepStrategy& strategy, int t);

}  // namespace aligndiff
