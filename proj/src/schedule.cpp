#include "aligndiff/schedule.hpp"

namespace aligndiff {

std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::eps:
      return "eps";
    case TargetKind::eps_corrected:
      return "eps_corrected";
    case TargetKind::x0:
      return "x0";
  }
  return "eps";
}

TargetKind target_kind_from_string(const std::string& name) {
  if (name == "eps") return TargetKind::eps;
  if (name == "eps_corrected") return TargetKind::eps_corrected;
  if (name == "x0") return TargetKind::x0;
  throw ConfigError("unknown target kind '" + name + "'");
}

NoiseSchedule::NoiseSchedule(int T, double beta_min, double beta_max)
    : T_(T), beta_min_(beta_min), beta_max_(beta_max) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_min <= beta_max < 1");
  }
  betas_.resize(T);
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : double(i) / double(T - 1);
    betas_[i] = beta_min + (beta_max - beta_min) * frac;
  }
  alpha_bars_.resize(T + 1);
  alpha_bars_[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - betas_[t - 1]);
  }
}

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  return NoiseSchedule(T, beta_min, beta_max);
}

}  // namespace aligndiff
