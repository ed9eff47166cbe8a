#pragma once

// Experiment orchestration: dataset splits, evaluation with intermediate
// checkpoints, metric traces for the statistics profile, persisted runs and
// multi-seed ablation grids.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aligndiff/config.hpp"
#include "aligndiff/contribution.hpp"
#include "aligndiff/guidance.hpp"

namespace aligndiff {

enum class Split { train, test, trace, hard };
std::string to_string(Split s);

/// Deterministic split of the configured task; `hard` keeps only scenes with
/// at least two distractors sharing an attribute with the target.
Dataset make_split(const ExperimentConfig& cfg, Split split);

struct EvalReport {
  int steps = 0;
  std::vector<int> checkpoint_ts;
  /// Dataset oIoU of the x0-hat mask at each checkpoint (decreasing t).
  std::vector<double> checkpoint_oiou;
  double final_oiou = 0.0;
  int argmax_index = -1;
  int argmax_t = 0;
  double best_oiou = 0.0;
  std::vector<double> sample_final_iou;

  /// Highest checkpoint oIoU minus the final one.
  double late_drop() const;
  nlohmann::json to_json() const;
};

/// Summarize trajectories that carry ground-truth metrics. The final mask is
/// included as a t = 0 point when choosing the argmax.
EvalReport summarize(const std::vector<Trajectory>& trajectories,
                     const std::vector<const Mask*>& truths, int steps);

/// Guided sampling of every example (seed derive_seed(seed, i)) and scoring.
EvalReport evaluate(const TrainedModel& model, const Dataset& data, const NoiseSchedule& schedule,
                    const SamplerOptions& options, const GuidanceWeights& w,
                    std::uint64_t seed);

/// Timestep at which each group is measured: the smallest grid timestep
/// inside the group, listed in denoising order (T-side group first).
std::vector<int> group_checkpoint_timesteps(const ContributionProfile& groups, int steps);

/// One trajectory per example with checkpoints at the group timesteps;
/// per-sample IoU forms the trace.
MetricTrace collect_trace(const TrainedModel& model, const Dataset& data,
                          const NoiseSchedule& schedule, int steps, int B,
                          const GuidanceWeights& w, std::uint64_t seed,
                          const MaskExtractionConfig& extraction = {}, int max_batch = 512,
                          bool clip_x0 = true);

struct RunRecord {
  std::string run_id;
  std::string config_hash;
  std::string dir;
  std::string checkpoint_path;
  std::vector<std::string> artifacts;
  std::string started;
  std::string finished;
  std::uint64_t seed = 0;
  std::string status = "pending";

  nlohmann::json to_json() const;
};

struct RunResult {
  RunRecord record;
  TrainedModel model;
  std::vector<TrainLogRow> log;
  std::optional<EvalReport> eval;
  std::string error;
};

struct RunOptions {
  /// Empty keeps everything in memory.
  std::string runs_dir;
  std::string run_id;
  bool evaluate = true;
  bool verbose = false;
};

/// Train on the train split, evaluate on the test split, persist artifacts
/// under runs_dir/run_id when a directory is given.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options);

/// Load a persisted model and its config from runs/<id>.
struct LoadedRun {
  ExperimentConfig config;
  TrainedModel model;
  CheckpointHeader header;
};
LoadedRun load_run(const std::string& run_dir);

/// Statistics profile of a trained model from its trace split.
StatsEstimate estimate_profile(const TrainedModel& model, const ExperimentConfig& cfg, int steps,
                               MetricTrace* trace_out = nullptr);

/// Config with the statistics profile plugged into prob_scaling sampling.
ExperimentConfig with_stats_profile(const ExperimentConfig& cfg, const ContributionProfile& p,
                                    StrategyKind kind = StrategyKind::prob_scaling);

struct AblationCell {
  std::string name;
  ExperimentConfig config;
  /// Use the statistics profile measured on this (earlier) cell's model of
  /// the same seed, with prob_scaling sampling.
  std::string stats_from;
};

struct AblationRow {
  std::string cell;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string status;
  std::optional<EvalReport> eval;
  std::optional<ContributionProfile> profile;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  struct Summary {
    std::string cell;
    int completed = 0;
    double mean_oiou = 0.0;
    double std_oiou = 0.0;
    std::vector<double> mean_curve;
  };
  std::vector<Summary> summaries() const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Train and evaluate every (cell, seed). The seed replaces train.seed. A
/// diverged cell is recorded as failed and the grid continues.
AblationReport run_ablation(const std::vector<AblationCell>& cells,
                            const std::vector<std::uint64_t>& seeds,
                            const RunOptions& options = {});

/// Parse {"base": {...}, "seeds": [...], "cells": [{"name", "set": [...],
/// "stats_from"?}]}.
std::pair<std::vector<AblationCell>, std::vector<std::uint64_t>> parse_ablation_spec(
    const nlohmann::json& spec, const ExperimentConfig& base);

/// Spearman rank correlation (average ranks for ties).
double spearman(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace aligndiff
