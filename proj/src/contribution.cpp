#include "aligndiff/contribution.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <Eigen/Cholesky>
#include <json.hpp>

#include "aligndiff/error.hpp"

namespace aligndiff {

std::string to_string(ProfileSource source) {
  switch (source) {
    case ProfileSource::schedule:
      return "schedule";
    case ProfileSource::statistics:
      return "statistics";
    case ProfileSource::uniform:
      return "uniform";
  }
  return "uniform";
}

ProfileSource profile_source_from_string(const std::string& name) {
  if (name == "schedule") return ProfileSource::schedule;
  if (name == "statistics") return ProfileSource::statistics;
  if (name == "uniform") return ProfileSource::uniform;
  throw FormatError("unknown profile source '" + name + "'");
}

int ContributionProfile::group_of(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) +
                            " outside profile range");
  }
  // First boundary >= t closes the group.
  auto it = std::lower_bound(group_bounds.begin() + 1, group_bounds.end(), t);
  return int(it - group_bounds.begin()) - 1;
}

void ContributionProfile::validate(double tol) const {
  const int B = group_count();
  if (B < 1 || int(group_bounds.size()) != B + 1) {
    throw ConfigError("profile needs B >= 1 weights and B + 1 bounds");
  }
  if (group_bounds.front() != 0) throw ConfigError("group bounds must start at 0");
  for (int b = 0; b < B; ++b) {
    if (group_bounds[b + 1] <= group_bounds[b]) {
      throw ConfigError("group bounds must be strictly increasing");
    }
  }
  if ((weights.array() < 0.0).any() || !weights.allFinite()) {
    throw ConfigError("profile weights must be finite and non-negative");
  }
  if (std::abs(weights.sum() - 1.0) > tol) {
    throw ConfigError("profile weights must sum to 1");
  }
}

std::vector<int> even_group_bounds(int T, int B) {
  if (T < 1 || B < 1 || B > T) {
    throw ConfigError("cannot split " + std::to_string(T) + " steps into " +
                      std::to_string(B) + " groups");
  }
  std::vector<int> bounds(B + 1);
  for (int b = 0; b <= B; ++b) bounds[b] = int((long long)b * T / B);
  return bounds;
}

ContributionProfile uniform_profile(int T, int B) {
  ContributionProfile p;
  p.source = ProfileSource::uniform;
  p.group_bounds = even_group_bounds(T, B);
  p.weights = Eigen::VectorXd::Constant(B, 1.0 / B);
  return p;
}

ContributionProfile schedule_profile(const NoiseSchedule& schedule, int B) {
  ContributionProfile p;
  p.source = ProfileSource::schedule;
  p.group_bounds = even_group_bounds(schedule.steps(), B);
  p.weights = Eigen::VectorXd::Zero(B);
  for (int b = 0; b < B; ++b) {
    for (int t = p.group_bounds[b] + 1; t <= p.group_bounds[b + 1]; ++t) {
      const double ab = schedule.alpha_bar(t);
      p.weights[b] += (1.0 - ab) / ab;
    }
  }
  p.weights /= p.weights.sum();
  return p;
}

RegressionFit fit_linear_regression(const Eigen::MatrixXd& X,
                                    const Eigen::VectorXd& y, double ridge) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  if (y.size() != n) throw ShapeError("regression: X rows != y size");
  if (n <= p + 1) {
    throw UnderdeterminedError("regression needs N > p + 1 (N=" +
                               std::to_string(n) + ", p=" + std::to_string(p) +
                               ")");
  }
  if (!X.allFinite() || !y.allFinite()) {
    throw std::invalid_argument("regression inputs must be finite");
  }

  const double y_mean = y.mean();
  const Eigen::VectorXd yc = y.array() - y_mean;
  const double ss_tot = yc.squaredNorm();
  if (ss_tot <= 0.0) throw DegenerateTargetError("regression target is constant");

  const Eigen::RowVectorXd x_mean = X.colwise().mean();
  const Eigen::MatrixXd Xc = X.rowwise() - x_mean;

  Eigen::MatrixXd gram = Xc.transpose() * Xc;
  gram.diagonal().array() += ridge;
  const Eigen::VectorXd slopes = gram.ldlt().solve(Xc.transpose() * yc);

  const double ss_res = (yc - Xc * slopes).squaredNorm();

  RegressionFit fit;
  fit.coefficients.resize(p + 1);
  fit.coefficients[0] = y_mean - x_mean.dot(slopes);
  fit.coefficients.tail(p) = slopes;
  fit.r_squared = std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
  return fit;
}

void MetricTrace::validate(bool bounded) const {
  if (checkpoint_metrics.rows() != final_metrics.size()) {
    throw ShapeError("trace: checkpoint rows != final metric count");
  }
  if (!checkpoint_metrics.allFinite() || !final_metrics.allFinite()) {
    throw FormatError("trace contains non-finite metrics");
  }
  if (bounded) {
    auto in_unit = [](const auto& a) {
      return (a.array() >= 0.0).all() && (a.array() <= 1.0).all();
    };
    if (!in_unit(checkpoint_metrics) || !in_unit(final_metrics)) {
      throw FormatError("bounded trace metrics must lie in [0, 1]");
    }
  }
}

Eigen::VectorXd floor_and_normalize(const Eigen::VectorXd& raw, double floor) {
  const Eigen::Index B = raw.size();
  if (B == 0) throw ConfigError("no weights to normalize");
  if (floor < 0.0 || floor * double(B) > 1.0 + 1e-12) {
    throw ConfigError("floor " + std::to_string(floor) + " infeasible for " +
                      std::to_string(B) + " groups");
  }
  Eigen::VectorXd w = raw.cwiseMax(0.0);
  const double total = w.sum();
  if (!(total > 0.0)) return Eigen::VectorXd::Constant(B, 1.0 / double(B));
  w /= total;

  // Entries pinned at the floor; the rest share the remaining mass in
  // proportion to their normalized raw weight.
  std::vector<bool> pinned(B, false);
  for (bool changed = true; changed;) {
    changed = false;
    double free_mass = 1.0;
    double free_raw = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
      if (pinned[b]) free_mass -= floor;
      else free_raw += w[b];
    }
    for (Eigen::Index b = 0; b < B; ++b) {
      if (pinned[b]) continue;
      const double scaled = free_raw > 0.0 ? w[b] * free_mass / free_raw : 0.0;
      if (scaled < floor) {
        pinned[b] = true;
        changed = true;
      }
    }
    if (!changed) {
      Eigen::VectorXd out(B);
      for (Eigen::Index b = 0; b < B; ++b) {
        out[b] = pinned[b] ? floor : w[b] * free_mass / free_raw;
      }
      return out;
    }
  }
  return w;  // unreachable
}

StatsEstimate estimate_stats(const MetricTrace& trace, int T, double floor) {
  trace.validate(false);
  const int N = trace.sample_count();
  const int B = trace.group_count();
  if (B < 1) throw ConfigError("trace has no checkpoint groups");
  if (N < 3 * B) {
    throw UnderdeterminedError("stats profile needs N >= 3B samples (N=" +
                               std::to_string(N) + ", B=" + std::to_string(B) +
                               ")");
  }

  StatsEstimate est;
  est.cumulative_r_squared.resize(B);
  est.raw_increments.resize(B);
  double previous = 0.0;
  for (int k = 0; k < B; ++k) {
    const RegressionFit fit =
        fit_linear_regression(trace.checkpoint_metrics.leftCols(k + 1),
                              trace.final_metrics);
    const double inc = fit.r_squared - previous;
    if (inc < -1e-9) {
      throw ConsistencyError("R^2 decreased when adding checkpoint group " +
                             std::to_string(k));
    }
    est.cumulative_r_squared[k] = fit.r_squared;
    est.raw_increments[k] = inc;
    previous = fit.r_squared;
  }

  // Trace columns run T-side first; profile weights run in increasing t.
  const Eigen::VectorXd by_t = est.raw_increments.reverse().cwiseMax(0.0);
  est.profile.source = ProfileSource::statistics;
  est.profile.group_bounds = even_group_bounds(T, B);
  est.profile.weights = floor_and_normalize(by_t, floor);
  return est;
}

ContributionProfile stats_profile(const MetricTrace& trace, int T,
                                  double floor) {
  return estimate_stats(trace, T, floor).profile;
}

void write_trace_csv(std::ostream& out, const MetricTrace& trace) {
  out << "sample_id,group_index,timestep,metric,final_metric\n";
  out.precision(17);
  for (int i = 0; i < trace.sample_count(); ++i) {
    for (int b = 0; b < trace.group_count(); ++b) {
      const int t = b < int(trace.checkpoint_timesteps.size())
                        ? trace.checkpoint_timesteps[b]
                        : -1;
      out << i << ',' << b << ',' << t << ',' << trace.checkpoint_metrics(i, b)
          << ',' << trace.final_metrics[i] << '\n';
    }
  }
}

MetricTrace read_trace_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) ||
      line != "sample_id,group_index,timestep,metric,final_metric") {
    throw FormatError("trace CSV: unexpected header");
  }
  struct Row {
    int sample, group, timestep;
    double metric, final_metric;
  };
  std::vector<Row> rows;
  int max_sample = -1;
  int max_group = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    Row r{};
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(ss >> r.sample >> c1 >> r.group >> c2 >> r.timestep >> c3 >>
          r.metric >> c4 >> r.final_metric) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw FormatError("trace CSV: malformed row '" + line + "'");
    }
    if (r.sample < 0 || r.group < 0) throw FormatError("trace CSV: negative index");
    max_sample = std::max(max_sample, r.sample);
    max_group = std::max(max_group, r.group);
    rows.push_back(r);
  }
  const int N = max_sample + 1;
  const int B = max_group + 1;
  if (int(rows.size()) != N * B) throw FormatError("trace CSV: missing entries");

  MetricTrace trace;
  trace.checkpoint_metrics = Eigen::MatrixXd::Constant(N, B, std::nan(""));
  trace.final_metrics = Eigen::VectorXd::Constant(N, std::nan(""));
  trace.checkpoint_timesteps.assign(B, -1);
  for (const Row& r : rows) {
    trace.checkpoint_metrics(r.sample, r.group) = r.metric;
    trace.final_metrics[r.sample] = r.final_metric;
    trace.checkpoint_timesteps[r.group] = r.timestep;
  }
  if (!trace.checkpoint_metrics.allFinite()) {
    throw FormatError("trace CSV: duplicate or missing (sample, group) pairs");
  }
  return trace;
}

std::string profile_to_json(const ContributionProfile& profile) {
  nlohmann::json j;
  j["source"] = to_string(profile.source);
  j["group_bounds"] = profile.group_bounds;
  j["weights"] = std::vector<double>(profile.weights.data(),
                                     profile.weights.data() + profile.weights.size());
  return j.dump(2);
}

ContributionProfile profile_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ContributionProfile p;
    p.source = profile_source_from_string(j.at("source").get<std::string>());
    p.group_bounds = j.at("group_bounds").get<std::vector<int>>();
    const auto w = j.at("weights").get<std::vector<double>>();
    p.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), Eigen::Index(w.size()));
    p.validate(1e-6);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("profile JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("profile JSON: ") + e.what());
  }
}

}  // namespace aligndiff
