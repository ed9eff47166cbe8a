#pragma once

// Classifier-free guidance with an optional correctional (negative)
// condition, DDIM trajectories that keep x0-hat snapshots along the way, and
// the propose-negatives / vote correction workflow.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aligndiff/denoiser.hpp"
#include "aligndiff/schedule.hpp"
#include "aligndiff/toytask.hpp"

namespace aligndiff {

struct GuidanceWeights {
  double w_I = 1.5;
  double w_D = 3.0;
  double w_D_neg = 2.0;

  /// The correctional path expects w_D > w_D_neg.
  bool ordered() const { return w_D > w_D_neg; }
  bool finite() const;
};

/// With a negative:
///   e_u + w_I (e_i - e_u) + w_D_neg (e_neg - e_i) + w_D (e_full - e_neg)
/// without one (e_neg ignored):
///   e_u + w_I (e_i - e_u) + w_D (e_full - e_i)
template <typename DU, typename DI, typename DN, typename DF>
typename DU::PlainObject compose_guidance(const Eigen::ArrayBase<DU>& e_uncond,
                                          const Eigen::ArrayBase<DI>& e_img,
                                          const Eigen::ArrayBase<DN>& e_neg,
                                          const Eigen::ArrayBase<DF>& e_full,
                                          const GuidanceWeights& w, bool has_negative) {
  using S = typename DU::Scalar;
  detail::require_same_size(e_uncond, e_img);
  detail::require_same_size(e_uncond, e_full);
  const S wi = S(w.w_I), wd = S(w.w_D), wn = S(w.w_D_neg);
  if (!has_negative) {
    return e_uncond + wi * (e_img - e_uncond) + wd * (e_full - e_img);
  }
  detail::require_same_size(e_uncond, e_neg);
  return e_uncond + wi * (e_img - e_uncond) + wn * (e_neg - e_img) + wd * (e_full - e_neg);
}

/// Network weights plus the output parameterization they were trained for.
struct TrainedModel {
  DenoiserParams<float> params;
  TargetKind target_kind = TargetKind::eps;
};

/// DDIM step grid t_k = (steps - k) * T / steps for k = 0..steps-1, i.e. the
/// timesteps at which the network is evaluated, in decreasing order.
std::vector<int> ddim_timesteps(int T, int steps);

/// Timesteps of the given 1-based sampler step indices.
std::vector<int> step_indices_to_timesteps(int T, int steps, const std::vector<int>& indices);

struct TrajectoryCheckpoint {
  int t = 0;
  SampleD x_t;
  SampleD x0_hat;
  Mask mask;
  /// IoU against the ground truth; NaN when none was supplied.
  double metric = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryCheckpoint> checkpoints;
  SampleD final;
  Mask final_mask;
  double final_metric = 0.0;
  std::uint64_t seed = 0;
  GuidanceWeights weights;
  bool has_negative = false;
  int steps = 0;
};

/// One trajectory to run inside a batch.
struct SampleRequest {
  const ToyScene* scene = nullptr;
  Condition condition;
  std::optional<Condition> negative;
  /// Optional ground truth for per-checkpoint metrics.
  const Mask* truth = nullptr;
  /// Seeds x_T ~ N(0, I).
  std::uint64_t seed = 0;
};

struct SamplerOptions {
  int steps = 100;
  /// Must lie on the DDIM grid; recorded in decreasing order.
  std::vector<int> checkpoint_ts;
  MaskExtractionConfig extraction;
  /// Clamp x0-hat to the data range [-1, 1] before each update.
  bool clip_x0 = true;
  /// Columns per forward pass; requests are processed in chunks.
  int max_batch = 512;
};

/// Runs every request in lock-step. A trajectory depends only on its own
/// request (up to float summation order inside the batched matrix product).
std::vector<Trajectory> sample_trajectories(const TrainedModel& model,
                                            const std::vector<SampleRequest>& requests,
                                            const GuidanceWeights& w,
                                            const NoiseSchedule& schedule,
                                            const SamplerOptions& options);

/// Single trajectory; x_T is seeded from one draw of rng.
Trajectory sample_trajectory(const TrainedModel& model, const ToyScene& scene,
                             const Condition& cond, const std::optional<Condition>& neg,
                             const GuidanceWeights& w, const NoiseSchedule& schedule,
                             const SamplerOptions& options, Rng& rng,
                             const Mask* truth = nullptr);

/// Suggests conditions describing objects a referral could be confused with.
class Advisor {
 public:
  virtual ~Advisor() = default;
  virtual std::string name() const = 0;
  virtual std::vector<Condition> propose(const ToyScene& scene, const Condition& cond,
                                         int k) const = 0;
};

/// Scores each non-target object: color match 2, shape match 2, qualifier
/// compatibility 1; ties go to the larger visible area, then lower index.
/// Each pick is named by a condition that resolves to it in the scene;
/// objects no condition can single out are skipped.
class RuleBasedAdvisor : public Advisor {
 public:
  explicit RuleBasedAdvisor(int qualifier_margin = 2) : margin_(qualifier_margin) {}
  std::string name() const override { return "rule-based"; }
  std::vector<Condition> propose(const ToyScene& scene, const Condition& cond,
                                 int k) const override;

 private:
  int margin_;
};

/// Rule-based advisor with the default margin.
std::vector<Condition> propose_negatives(const ToyScene& scene, const Condition& cond, int k);

/// Pixel on iff strictly more than half of the masks are on.
Mask majority_vote(const std::vector<Mask>& masks);

struct WorkflowProvenance {
  Condition condition;
  std::vector<Condition> negatives;
  std::vector<std::uint64_t> seeds;
  /// NaN entries when no ground truth was given.
  std::vector<double> branch_ious;
  GuidanceWeights weights;
  int steps = 0;
  std::string advisor;

  nlohmann::json to_json() const;
};

struct WorkflowResult {
  Mask mask;
  std::vector<Trajectory> branches;
  WorkflowProvenance provenance;
};

/// One corrected trajectory per proposed negative (seeds derived from
/// base_seed), fused by majority vote. Without negatives a single trajectory
/// runs with the plain two-condition guidance.
WorkflowResult run_correction_workflow(const TrainedModel& model, const ToyScene& scene,
                                       const Condition& cond, int k, const GuidanceWeights& w,
                                       const NoiseSchedule& schedule,
                                       const SamplerOptions& options, std::uint64_t base_seed,
                                       const Mask* truth = nullptr,
                                       const Advisor* advisor = nullptr);

/// Batched form over many scenes; each item uses base_seeds[i].
struct WorkflowItem {
  const ToyScene* scene = nullptr;
  Condition condition;
  const Mask* truth = nullptr;
  std::uint64_t base_seed = 0;
};
std::vector<WorkflowResult> run_correction_workflows(const TrainedModel& model,
                                                     const std::vector<WorkflowItem>& items,
                                                     int k, const GuidanceWeights& w,
                                                     const NoiseSchedule& schedule,
                                                     const SamplerOptions& options,
                                                     const Advisor* advisor = nullptr);

nlohmann::json condition_to_json(const Condition& c);
Condition condition_from_json(const nlohmann::json& j);

}  // namespace aligndiff
