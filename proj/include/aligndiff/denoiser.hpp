#pragma once

// Tiny conditional denoiser: a two-hidden-layer SiLU MLP over
//   [x_t | conditioning image | condition encoding | sinusoidal time embedding]
// with hand-written reverse-mode gradients and a decoupled-weight-decay Adam
// optimizer. Templated on the scalar type: float for training and sampling,
// double for gradient checks.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "aligndiff/augmentation.hpp"
#include "aligndiff/random.hpp"
#include "aligndiff/schedule.hpp"
#include "aligndiff/strategy.hpp"
#include "aligndiff/toytask.hpp"

namespace aligndiff {

struct ModelConfig {
  int grid = 16;
  int cond_dim = kConditionDim;
  int time_dim = 32;
  int hidden = 256;

  int sample_dim() const { return 3 * grid * grid; }
  int input_dim() const { return 2 * sample_dim() + cond_dim + time_dim; }
  int output_dim() const { return sample_dim(); }
  /// in*h + h + h*h + h + h*out + out
  std::size_t parameter_count() const;
  void validate() const;
};

template <typename Scalar>
struct DenoiserParams {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  ModelConfig config;
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix w3;
  Vector b3;

  /// Zero-filled parameters (or gradients) of the given topology.
  static DenoiserParams zeros(const ModelConfig& config);

  std::size_t parameter_count() const;
  /// Visit every parameter block in a fixed order.
  template <typename F>
  void for_each_block(F&& f) {
    f(w1.data(), w1.size());
    f(b1.data(), b1.size());
    f(w2.data(), w2.size());
    f(b2.data(), b2.size());
    f(w3.data(), w3.size());
    f(b3.data(), b3.size());
  }
  template <typename F>
  void for_each_block(F&& f) const {
    f(w1.data(), w1.size());
    f(b1.data(), b1.size());
    f(w2.data(), w2.size());
    f(b2.data(), b2.size());
    f(w3.data(), w3.size());
    f(b3.data(), b3.size());
  }

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> flatten() const;
  void assign(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& flat);
  bool all_finite() const;

  template <typename Other>
  DenoiserParams<Other> cast() const {
    DenoiserParams<Other> p;
    p.config = config;
    p.w1 = w1.template cast<Other>();
    p.b1 = b1.template cast<Other>();
    p.w2 = w2.template cast<Other>();
    p.b2 = b2.template cast<Other>();
    p.w3 = w3.template cast<Other>();
    p.b3 = b3.template cast<Other>();
    return p;
  }
};

/// Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
template <typename Scalar>
DenoiserParams<Scalar> init_params(const ModelConfig& config, Rng& rng);

/// 32-dim sin/cos embedding of an integer timestep.
Eigen::VectorXd timestep_embedding(int t, int dim);

/// Fill column `col` of an input matrix.
template <typename Scalar, typename DX>
void write_input_column(Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& inputs,
                        Eigen::Index col, const ModelConfig& config,
                        const Eigen::ArrayBase<DX>& x_t, const SampleD& image,
                        const Eigen::VectorXd& cond, int t) {
  const int d = config.sample_dim();
  if (x_t.size() != d || image.size() != d || cond.size() != config.cond_dim) {
    throw ShapeError("denoiser input does not match the model topology");
  }
  auto c = inputs.col(col);
  c.segment(0, d) = x_t.matrix().template cast<Scalar>();
  c.segment(d, d) = image.matrix().template cast<Scalar>();
  c.segment(2 * d, config.cond_dim) = cond.template cast<Scalar>();
  c.segment(2 * d + config.cond_dim, config.time_dim) =
      timestep_embedding(t, config.time_dim).template cast<Scalar>();
}

/// Intermediate values kept for the backward pass.
template <typename Scalar>
struct Activations {
  using Matrix = typename DenoiserParams<Scalar>::Matrix;
  Matrix input;
  Matrix z1, h1, z2, h2;
  Matrix output;
};

/// Batched forward pass; columns are samples.
template <typename Scalar>
typename DenoiserParams<Scalar>::Matrix forward_batch(
    const DenoiserParams<Scalar>& params,
    const typename DenoiserParams<Scalar>::Matrix& inputs);

template <typename Scalar>
Activations<Scalar> forward_with_activations(
    const DenoiserParams<Scalar>& params,
    typename DenoiserParams<Scalar>::Matrix inputs);

/// Reverse-mode gradients of a scalar loss given dL/d(output).
template <typename Scalar>
DenoiserParams<Scalar> backward(const DenoiserParams<Scalar>& params,
                                const Activations<Scalar>& acts,
                                const typename DenoiserParams<Scalar>::Matrix& d_output);

/// Single-sample network evaluation eps_theta(x_t, I, D, t).
template <typename Scalar>
Sample<Scalar> forward(const DenoiserParams<Scalar>& params, const Sample<Scalar>& x_t,
                       const SampleD& image, const Condition& cond, int t);

template <typename Scalar>
struct OptimizerState {
  DenoiserParams<Scalar> m;
  DenoiserParams<Scalar> v;
  long long step = 0;

  static OptimizerState zeros(const ModelConfig& config) {
    return {DenoiserParams<Scalar>::zeros(config), DenoiserParams<Scalar>::zeros(config), 0};
  }
};

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One decoupled-weight-decay Adam update (decay applied to weight matrices).
template <typename Scalar>
void adamw_update(DenoiserParams<Scalar>& params, const DenoiserParams<Scalar>& grads,
                  OptimizerState<Scalar>& state, const AdamWConfig& cfg);

enum class LrSchedule { constant, cosine };
std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& name);

struct TrainConfig {
  TargetKind target_kind = TargetKind::eps;
  TimestepStrategy strategy = TimestepStrategy::uniform(1000, 10);
  AugmentationSpec aug;
  double cond_drop_prob = 0.1;
  double image_drop_prob = 0.1;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::cosine;
  int batch_size = 64;
  int epochs = 30;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  /// Validation cadence in epochs (0 disables).
  int eval_every = 0;

  void validate() const;
};

/// One training item: scene, referring condition and ground-truth mask.
struct TrainItem {
  const ToyScene* scene;
  const Condition* condition;
  const Mask* truth;
};

/// Randomness of one optimization step, drawn up front.
template <typename Scalar>
struct PreparedBatch {
  typename DenoiserParams<Scalar>::Matrix inputs;
  typename DenoiserParams<Scalar>::Matrix targets;
  Eigen::VectorXd loss_weights;
  std::vector<int> timesteps;
  std::vector<bool> condition_dropped;
  std::vector<bool> image_dropped;
};

template <typename Scalar>
PreparedBatch<Scalar> prepare_batch(const ModelConfig& model,
                                    const std::vector<TrainItem>& batch,
                                    const TrainConfig& cfg,
                                    const NoiseSchedule& schedule, Rng& rng);

/// Mean weighted per-pixel squared error and its gradient.
template <typename Scalar>
double loss_and_gradient(const DenoiserParams<Scalar>& params,
                         const PreparedBatch<Scalar>& batch,
                         DenoiserParams<Scalar>* grads);

/// Draw a batch, take one AdamW step at the given learning rate, return the
/// loss. Throws DivergenceError on a non-finite loss.
template <typename Scalar>
double train_step(DenoiserParams<Scalar>& params, OptimizerState<Scalar>& opt,
                  const std::vector<TrainItem>& batch, const TrainConfig& cfg,
                  const NoiseSchedule& schedule, Rng& rng, double learning_rate);

struct TrainLogRow {
  int epoch = 0;
  long long step = 0;
  double loss = 0.0;
  /// NaN when validation did not run this epoch.
  double val_oiou = 0.0;
};

struct TrainResult {
  DenoiserParams<float> params;
  std::vector<TrainLogRow> log;
};

using ValidationFn = std::function<double(const DenoiserParams<float>&)>;

TrainResult train(const Dataset& data, const ModelConfig& model,
                  const TrainConfig& cfg, const NoiseSchedule& schedule,
                  const ValidationFn& validate = {});

void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& log);

/// Checkpoint: "ADCK", uint32 header length, JSON header, float32 parameters.
struct CheckpointHeader {
  ModelConfig model;
  TargetKind target_kind = TargetKind::eps;
  std::string config_hash;
  std::uint64_t seed = 0;
  int schedule_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
};

void write_checkpoint(const std::string& path, const DenoiserParams<float>& params,
                      const CheckpointHeader& header);
std::pair<DenoiserParams<float>, CheckpointHeader> read_checkpoint(const std::string& path);

}  // namespace aligndiff
