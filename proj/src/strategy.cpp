#include "aligndiff/strategy.hpp"

#include "aligndiff/error.hpp"

namespace aligndiff {

std::string to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::uniform:
      return "uniform";
    case StrategyKind::loss_scaling:
      return "loss_scaling";
    case StrategyKind::prob_scaling:
      return "prob_scaling";
  }
  return "uniform";
}

StrategyKind strategy_kind_from_string(const std::string& name) {
  if (name == "uniform") return StrategyKind::uniform;
  if (name == "loss_scaling") return StrategyKind::loss_scaling;
  if (name == "prob_scaling") return StrategyKind::prob_scaling;
  throw ConfigError("unknown strategy '" + name + "'");
}

TimestepStrategy TimestepStrategy::uniform(int T, int B) {
  return {StrategyKind::uniform, uniform_profile(T, B)};
}

TimestepStrategy TimestepStrategy::loss_scaling(ContributionProfile profile) {
  profile.validate(1e-6);
  return {StrategyKind::loss_scaling, std::move(profile)};
}

TimestepStrategy TimestepStrategy::prob_scaling(ContributionProfile profile) {
  profile.validate(1e-6);
  return {StrategyKind::prob_scaling, std::move(profile)};
}

int sample_timestep(const TimestepStrategy& strategy, Rng& rng) {
  const auto& p = strategy.profile;
  if (strategy.kind != StrategyKind::prob_scaling) {
    return std::uniform_int_distribution<int>(1, p.steps())(rng);
  }
  const double u = uniform(rng, 0.0, p.weights.sum());
  int group = p.group_count() - 1;
  double acc = 0.0;
  for (int b = 0; b < p.group_count(); ++b) {
    acc += p.weights[b];
    if (u < acc) {
      group = b;
      break;
    }
  }
  return std::uniform_int_distribution<int>(p.group_bounds[group] + 1,
                                            p.group_bounds[group + 1])(rng);
}

double loss_weight(const TimestepStrategy& strategy, int t) {
  if (strategy.kind != StrategyKind::loss_scaling) {
    strategy.profile.group_of(t);  // range check
    return 1.0;
  }
  const auto& p = strategy.profile;
  return double(p.group_count()) * p.weights[p.group_of(t)];
}

}  // namespace aligndiff
