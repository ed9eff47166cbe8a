#pragma once

// Contribution factors c_t^2: how much of the final perception quality each
// timestep group accounts for. Two estimators: one read off the noise
// schedule, one from metric statistics of real denoising trajectories via
// nested R^2 regressions.

#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "aligndiff/schedule.hpp"

namespace aligndiff {

enum class ProfileSource { schedule, statistics, uniform };

std::string to_string(ProfileSource source);
ProfileSource profile_source_from_string(const std::string& name);

/// Per-group timestep weights. Group b covers t in (group_bounds[b],
/// group_bounds[b+1]], so weights are ordered by increasing t.
struct ContributionProfile {
  ProfileSource source = ProfileSource::uniform;
  std::vector<int> group_bounds;
  Eigen::VectorXd weights;

  int group_count() const { return int(weights.size()); }
  int steps() const { return group_bounds.empty() ? 0 : group_bounds.back(); }
  /// Group containing timestep t (1 <= t <= T).
  int group_of(int t) const;
  /// Throws ConfigError if bounds or weights break the invariants.
  void validate(double tol = 1e-9) const;
};

/// B + 1 boundaries splitting 1..T into near-equal groups.
std::vector<int> even_group_bounds(int T, int B);

ContributionProfile uniform_profile(int T, int B);

/// Schedule-derived weights: (1 - abar_t) / abar_t summed per group, normalized.
ContributionProfile schedule_profile(const NoiseSchedule& schedule, int B);

struct RegressionFit {
  /// Intercept followed by one slope per regressor column.
  Eigen::VectorXd coefficients;
  double r_squared = 0.0;
};

/// Ordinary least squares with intercept via ridge-damped normal equations
/// on centered data. Throws UnderdeterminedError if N <= p + 1 and
/// DegenerateTargetError if y has zero variance.
RegressionFit fit_linear_regression(const Eigen::MatrixXd& X,
                                    const Eigen::VectorXd& y,
                                    double ridge = 1e-8);

/// N samples x B checkpoint metrics. Column 0 is the group nearest t = T,
/// the last column the group nearest t = 1, i.e. denoising order.
struct MetricTrace {
  Eigen::MatrixXd checkpoint_metrics;
  Eigen::VectorXd final_metrics;
  /// Timestep at which each column was measured (denoising order).
  std::vector<int> checkpoint_timesteps;

  int sample_count() const { return int(final_metrics.size()); }
  int group_count() const { return int(checkpoint_metrics.cols()); }
  void validate(bool bounded = true) const;
};

struct StatsEstimate {
  /// R^2 after including the first k + 1 checkpoint columns.
  Eigen::VectorXd cumulative_r_squared;
  /// Unclamped increments in denoising order (column order of the trace).
  Eigen::VectorXd raw_increments;
  ContributionProfile profile;
};

/// Full estimator output, including the intermediate R^2 ladder.
StatsEstimate estimate_stats(const MetricTrace& trace, int T, double floor);

/// Statistics-derived profile (weights ordered by increasing t).
ContributionProfile stats_profile(const MetricTrace& trace, int T,
                                  double floor = 0.01);

/// Normalize non-negative raw weights, then raise entries below floor to the
/// floor and rescale the rest so the total stays 1.
Eigen::VectorXd floor_and_normalize(const Eigen::VectorXd& raw, double floor);

void write_trace_csv(std::ostream& out, const MetricTrace& trace);
MetricTrace read_trace_csv(std::istream& in);

std::string profile_to_json(const ContributionProfile& profile);
ContributionProfile profile_from_json(const std::string& text);

}  // namespace aligndiff
