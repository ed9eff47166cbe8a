#pragma once

// Experiment configuration: one JSON document with sections schedule, task,
// model, train, augment, eval, guidance and workflow. Missing keys take
// defaults, unknown keys are rejected, and the hash is computed over the
// canonical (sorted-key) serialization.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aligndiff/augmentation.hpp"
#include "aligndiff/contribution.hpp"
#include "aligndiff/denoiser.hpp"
#include "aligndiff/guidance.hpp"
#include "aligndiff/strategy.hpp"
#include "aligndiff/toytask.hpp"

namespace aligndiff {

struct ScheduleSection {
  int T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;

  NoiseSchedule build() const { return NoiseSchedule(T, beta_min, beta_max); }
};

struct TaskSection {
  TaskConfig generator;
  int train_size = 4096;
  int test_size = 512;
  /// Held-out samples whose trajectories feed the statistics profile.
  int trace_size = 300;
  std::uint64_t seed = 1;
};

struct TrainSection {
  /// Unset ("auto") resolves to x0; the eps target does not train at this scale.
  std::optional<TargetKind> target_kind;
  StrategyKind strategy = StrategyKind::uniform;
  ProfileSource profile_source = ProfileSource::uniform;
  /// Explicit weights for a statistics profile (ascending t); empty otherwise.
  std::vector<double> profile_weights;
  int groups = 10;
  double floor = 0.01;
  double cond_drop_prob = 0.1;
  double image_drop_prob = 0.1;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::cosine;
  int batch_size = 64;
  int epochs = 30;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  int eval_every = 0;
};

struct EvalSection {
  int steps = 100;
  /// 1-based sampler step indices at which x0-hat is scored.
  std::vector<int> checkpoint_steps{2, 20, 40, 60, 80, 100};
  std::vector<int> trace_steps{100, 50, 25};
  double delta = 0.4;
  bool clip_x0 = true;
  std::uint64_t seed = 7;
  int max_batch = 512;
};

struct WorkflowSection {
  int k = 3;
  std::string advisor = "rule-based";
};

struct ExperimentConfig {
  ScheduleSection schedule;
  TaskSection task;
  ModelConfig model;
  TrainSection train;
  AugmentationSpec augment;
  EvalSection eval;
  /// w_D_neg only applies when a negative condition is present.
  GuidanceWeights guidance;
  WorkflowSection workflow;

  TargetKind target_kind() const;
  /// Throws ConfigError on any invalid value.
  void validate() const;
  bool operator==(const ExperimentConfig& o) const;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
/// Keys absent from the document keep their defaults; unknown keys throw.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
void save_config(const std::string& path, const ExperimentConfig& cfg);

/// Apply "section.key=value" overrides. Values parse as JSON when possible,
/// otherwise as strings.
ExperimentConfig apply_overrides(const ExperimentConfig& cfg,
                                 const std::vector<std::string>& assignments);

/// 16 hex digits of FNV-1a over the canonical serialization.
std::string config_hash(const ExperimentConfig& cfg);
std::string fnv1a_hex(const std::string& bytes);

/// Timestep strategy described by the train section.
TimestepStrategy build_strategy(const ExperimentConfig& cfg, const NoiseSchedule& schedule);
TrainConfig build_train_config(const ExperimentConfig& cfg, const NoiseSchedule& schedule);
SamplerOptions build_sampler_options(const ExperimentConfig& cfg, const NoiseSchedule& schedule);

/// Keys whose values differ between two configurations, as dot paths.
std::vector<std::string> config_diff(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace aligndiff
