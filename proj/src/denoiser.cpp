#include "aligndiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "aligndiff/error.hpp"

namespace aligndiff {

std::size_t ModelConfig::parameter_count() const {
  const std::size_t in = input_dim(), h = hidden, out = output_dim();
  return in * h + h + h * h + h + h * out + out;
}

void ModelConfig::validate() const {
  if (grid < 1 || cond_dim < 0 || time_dim < 2 || time_dim % 2 != 0 || hidden < 1) {
    throw ConfigError("invalid model topology");
  }
}

template <typename Scalar>
DenoiserParams<Scalar> DenoiserParams<Scalar>::zeros(const ModelConfig& config) {
  config.validate();
  DenoiserParams p;
  p.config = config;
  const int in = config.input_dim(), h = config.hidden, out = config.output_dim();
  p.w1 = Matrix::Zero(h, in);
  p.b1 = Vector::Zero(h);
  p.w2 = Matrix::Zero(h, h);
  p.b2 = Vector::Zero(h);
  p.w3 = Matrix::Zero(out, h);
  p.b3 = Vector::Zero(out);
  return p;
}

template <typename Scalar>
std::size_t DenoiserParams<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for_each_block([&](const Scalar*, Eigen::Index size) { n += std::size_t(size); });
  return n;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> DenoiserParams<Scalar>::flatten() const {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index pos = 0;
  for_each_block([&](const Scalar* data, Eigen::Index size) {
    std::copy(data, data + size, flat.data() + pos);
    pos += size;
  });
  return flat;
}

template <typename Scalar>
void DenoiserParams<Scalar>::assign(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& flat) {
  if (std::size_t(flat.size()) != parameter_count()) {
    throw ShapeError("flat parameter vector has the wrong length");
  }
  Eigen::Index pos = 0;
  for_each_block([&](Scalar* data, Eigen::Index size) {
    std::copy(flat.data() + pos, flat.data() + pos + size, data);
    pos += size;
  });
}

template <typename Scalar>
bool DenoiserParams<Scalar>::all_finite() const {
  bool ok = true;
  for_each_block([&](const Scalar* data, Eigen::Index size) {
    ok = ok && Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(data, size).allFinite();
  });
  return ok;
}

template <typename Scalar>
DenoiserParams<Scalar> init_params(const ModelConfig& config, Rng& rng) {
  auto p = DenoiserParams<Scalar>::zeros(config);
  auto fill = [&rng](auto& w) {
    const double bound = 1.0 / std::sqrt(double(w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = Scalar(u(rng));
    }
  };
  fill(p.w1);
  fill(p.w2);
  fill(p.w3);
  return p;
}

Eigen::VectorXd timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  Eigen::VectorXd e(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    e[i] = std::sin(double(t) * freq);
    e[half + i] = std::cos(double(t) * freq);
  }
  return e;
}

namespace {

template <typename M>
M silu(const M& z) {
  return (z.array() / (1 + (-z.array()).exp())).matrix();
}

// d/dz [z * sigmoid(z)] = s + z s (1 - s)
template <typename M>
M silu_grad(const M& z) {
  const auto s = (1 / (1 + (-z.array()).exp())).eval();
  return (s + z.array() * s * (1 - s)).matrix();
}

}  // namespace

template <typename Scalar>
Activations<Scalar> forward_with_activations(const DenoiserParams<Scalar>& params,
                                             typename DenoiserParams<Scalar>::Matrix inputs) {
  if (inputs.rows() != params.w1.cols()) throw ShapeError("input rows != model input dim");
  Activations<Scalar> a;
  a.input = std::move(inputs);
  a.z1.noalias() = params.w1 * a.input;
  a.z1.colwise() += params.b1;
  a.h1 = silu(a.z1);
  a.z2.noalias() = params.w2 * a.h1;
  a.z2.colwise() += params.b2;
  a.h2 = silu(a.z2);
  a.output.noalias() = params.w3 * a.h2;
  a.output.colwise() += params.b3;
  return a;
}

template <typename Scalar>
typename DenoiserParams<Scalar>::Matrix forward_batch(
    const DenoiserParams<Scalar>& params,
    const typename DenoiserParams<Scalar>::Matrix& inputs) {
  using Matrix = typename DenoiserParams<Scalar>::Matrix;
  if (inputs.rows() != params.w1.cols()) throw ShapeError("input rows != model input dim");
  Matrix z1;
  z1.noalias() = params.w1 * inputs;
  z1.colwise() += params.b1;
  const Matrix h1 = silu(z1);
  Matrix z2;
  z2.noalias() = params.w2 * h1;
  z2.colwise() += params.b2;
  const Matrix h2 = silu(z2);
  Matrix out;
  out.noalias() = params.w3 * h2;
  out.colwise() += params.b3;
  return out;
}

template <typename Scalar>
DenoiserParams<Scalar> backward(const DenoiserParams<Scalar>& params,
                                const Activations<Scalar>& acts,
                                const typename DenoiserParams<Scalar>::Matrix& d_output) {
  using Matrix = typename DenoiserParams<Scalar>::Matrix;
  DenoiserParams<Scalar> g;
  g.config = params.config;
  g.w3.noalias() = d_output * acts.h2.transpose();
  g.b3 = d_output.rowwise().sum();
  Matrix d_h2;
  d_h2.noalias() = params.w3.transpose() * d_output;
  const Matrix d_z2 = d_h2.cwiseProduct(silu_grad(acts.z2));
  g.w2.noalias() = d_z2 * acts.h1.transpose();
  g.b2 = d_z2.rowwise().sum();
  Matrix d_h1;
  d_h1.noalias() = params.w2.transpose() * d_z2;
  const Matrix d_z1 = d_h1.cwiseProduct(silu_grad(acts.z1));
  g.w1.noalias() = d_z1 * acts.input.transpose();
  g.b1 = d_z1.rowwise().sum();
  return g;
}

template <typename Scalar>
Sample<Scalar> forward(const DenoiserParams<Scalar>& params, const Sample<Scalar>& x_t,
                       const SampleD& image, const Condition& cond, int t) {
  typename DenoiserParams<Scalar>::Matrix in(params.config.input_dim(), 1);
  write_input_column(in, 0, params.config, x_t, image, cond.encode(), t);
  return forward_batch(params, in).col(0).array();
}

template <typename Scalar>
void adamw_update(DenoiserParams<Scalar>& params, const DenoiserParams<Scalar>& grads,
                  OptimizerState<Scalar>& state, const AdamWConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  const Scalar lr = Scalar(cfg.learning_rate);
  const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  const Scalar step_scale = Scalar(cfg.learning_rate / bc1);
  const Scalar inv_sqrt_bc2 = Scalar(1.0 / std::sqrt(bc2));
  const Scalar eps = Scalar(cfg.epsilon);
  const Scalar decay = Scalar(1.0 - cfg.learning_rate * cfg.weight_decay);

  auto update = [&](auto& p, const auto& g, auto& m, auto& v, bool decayed) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseAbs2();
    if (lr == Scalar(0)) return;
    if (decayed) p *= decay;
    p.array() -= step_scale * m.array() / ((v.array().sqrt() * inv_sqrt_bc2) + eps);
  };
  update(params.w1, grads.w1, state.m.w1, state.v.w1, true);
  update(params.b1, grads.b1, state.m.b1, state.v.b1, false);
  update(params.w2, grads.w2, state.m.w2, state.v.w2, true);
  update(params.b2, grads.b2, state.m.b2, state.v.b2, false);
  update(params.w3, grads.w3, state.m.w3, state.v.w3, true);
  update(params.b3, grads.b3, state.m.b3, state.v.b3, false);
}

std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule lr_schedule_from_string(const std::string& name) {
  if (name == "cosine") return LrSchedule::cosine;
  if (name == "constant") return LrSchedule::constant;
  throw ConfigError("unknown lr schedule '" + name + "'");
}

void TrainConfig::validate() const {
  if (cond_drop_prob < 0.0 || cond_drop_prob > 1.0 || image_drop_prob < 0.0 ||
      image_drop_prob > 1.0) {
    throw ConfigError("drop probabilities must lie in [0, 1]");
  }
  if (learning_rate < 0.0) throw ConfigError("learning rate must be non-negative");
  if (batch_size < 1 || epochs < 0) throw ConfigError("batch_size and epochs must be positive");
  aug.validate();
}

template <typename Scalar>
PreparedBatch<Scalar> prepare_batch(const ModelConfig& model,
                                    const std::vector<TrainItem>& batch,
                                    const TrainConfig& cfg,
                                    const NoiseSchedule& schedule, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("train batch is empty");
  const int n = int(batch.size());
  const int d = model.sample_dim();
  const int T = schedule.steps();
  if (cfg.strategy.steps() != T) throw ConfigError("strategy and schedule disagree on T");

  PreparedBatch<Scalar> pb;
  pb.inputs.resize(model.input_dim(), n);
  pb.targets.resize(d, n);
  pb.loss_weights.resize(n);
  pb.timesteps.resize(n);
  pb.condition_dropped.resize(n);
  pb.image_dropped.resize(n);
  const SampleD blank = SampleD::Zero(d);
  const Eigen::VectorXd null_cond = Eigen::VectorXd::Zero(model.cond_dim);
  std::bernoulli_distribution drop_cond(cfg.cond_drop_prob);
  std::bernoulli_distribution drop_image(cfg.image_drop_prob);

  for (int i = 0; i < n; ++i) {
    const TrainItem& item = batch[i];
    if (item.scene->grid != model.grid) throw ShapeError("scene grid != model grid");
    const int t = sample_timestep(cfg.strategy, rng);
    const SampleD x0 = render_target(*item.scene, *item.truth);
    const SampleD x0_aug = cfg.aug.enabled
                               ? augment(x0, *item.truth, item.scene->image, model.grid, t,
                                         T, cfg.aug, rng)
                               : x0;
    const SampleD eps = standard_normal<double>(d, rng);
    const SampleD x_t = forward_diffuse(x0_aug, t, eps, schedule);
    SampleD target;
    switch (cfg.target_kind) {
      case TargetKind::eps:
        target = eps;
        break;
      case TargetKind::eps_corrected:
        target = corrected_epsilon(x0, x0_aug, eps, t, schedule);
        break;
      case TargetKind::x0:
        target = x0;
        break;
    }
    const bool no_cond = drop_cond(rng);
    const bool no_image = drop_image(rng);
    write_input_column(pb.inputs, i, model, x_t, no_image ? blank : item.scene->image,
                       no_cond ? null_cond : item.condition->encode(), t);
    pb.targets.col(i) = target.matrix().template cast<Scalar>();
    pb.loss_weights[i] = loss_weight(cfg.strategy, t);
    pb.timesteps[i] = t;
    pb.condition_dropped[i] = no_cond;
    pb.image_dropped[i] = no_image;
  }
  return pb;
}

template <typename Scalar>
double loss_and_gradient(const DenoiserParams<Scalar>& params,
                         const PreparedBatch<Scalar>& batch,
                         DenoiserParams<Scalar>* grads) {
  using Matrix = typename DenoiserParams<Scalar>::Matrix;
  const Eigen::Index n = batch.inputs.cols();
  const Eigen::Index d = batch.targets.rows();
  Activations<Scalar> acts = forward_with_activations(params, batch.inputs);
  const Matrix diff = acts.output - batch.targets;

  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    loss += batch.loss_weights[i] * double(diff.col(i).squaredNorm());
  }
  loss /= double(n * d);

  if (grads) {
    Matrix d_out = diff;
    for (Eigen::Index i = 0; i < n; ++i) {
      d_out.col(i) *= Scalar(2.0 * batch.loss_weights[i] / double(n * d));
    }
    *grads = backward(params, acts, d_out);
  }
  return loss;
}

template <typename Scalar>
double train_step(DenoiserParams<Scalar>& params, OptimizerState<Scalar>& opt,
                  const std::vector<TrainItem>& batch, const TrainConfig& cfg,
                  const NoiseSchedule& schedule, Rng& rng, double learning_rate) {
  const PreparedBatch<Scalar> pb = prepare_batch<Scalar>(params.config, batch, cfg, schedule, rng);
  DenoiserParams<Scalar> grads;
  const double loss = loss_and_gradient(params, pb, &grads);
  if (!std::isfinite(loss)) {
    throw DivergenceError("non-finite loss at optimizer step " + std::to_string(opt.step + 1));
  }
  AdamWConfig adam;
  adam.learning_rate = learning_rate;
  adam.weight_decay = cfg.weight_decay;
  adamw_update(params, grads, opt, adam);
  return loss;
}

TrainResult train(const Dataset& data, const ModelConfig& model, const TrainConfig& cfg,
                  const NoiseSchedule& schedule, const ValidationFn& validate) {
  if (data.items.empty()) throw std::invalid_argument("training dataset is empty");
  cfg.validate();
  Rng rng(cfg.seed);
  TrainResult result;
  result.params = init_params<float>(model, rng);
  auto opt = OptimizerState<float>::zeros(model);

  const int n = int(data.items.size());
  const int batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long long total_steps = std::max<long long>(1, (long long)batches * cfg.epochs);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (int b = 0; b < batches; ++b) {
      std::vector<TrainItem> batch;
      for (int k = b * cfg.batch_size; k < std::min(n, (b + 1) * cfg.batch_size); ++k) {
        const Example& ex = data.items[order[k]];
        batch.push_back({&ex.scene, &ex.condition, &ex.truth});
      }
      double lr = cfg.learning_rate;
      if (cfg.lr_schedule == LrSchedule::cosine) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * double(opt.step) / double(total_steps)));
      }
      try {
        loss_sum += train_step(result.params, opt, batch, cfg, schedule, rng, lr);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(b) + ")");
      }
    }
    TrainLogRow row;
    row.epoch = epoch;
    row.step = opt.step;
    row.loss = loss_sum / batches;
    row.val_oiou = std::nan("");
    if (validate && cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      row.val_oiou = validate(result.params);
    }
    result.log.push_back(row);
  }
  return result;
}

void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& log) {
  out << "epoch,step,loss,val_oiou\n";
  out.precision(10);
  for (const auto& r : log) {
    out << r.epoch << ',' << r.step << ',' << r.loss << ',';
    if (std::isfinite(r.val_oiou)) out << r.val_oiou;
    out << '\n';
  }
}

namespace {

constexpr char kCheckpointMagic[4] = {'A', 'D', 'C', 'K'};

nlohmann::json header_json(const CheckpointHeader& h, std::size_t count) {
  return {{"format", "aligndiff-checkpoint-v1"},
          {"topology",
           {{"grid", h.model.grid},
            {"cond_dim", h.model.cond_dim},
            {"time_dim", h.model.time_dim},
            {"hidden", h.model.hidden},
            {"activation", "silu"},
            {"layout", "w1,b1,w2,b2,w3,b3 column-major float32"}}},
          {"parameter_count", count},
          {"target_kind", to_string(h.target_kind)},
          {"config_hash", h.config_hash},
          {"seed", h.seed},
          {"schedule", {{"T", h.schedule_steps}, {"beta_min", h.beta_min}, {"beta_max", h.beta_max}}}};
}

}  // namespace

void write_checkpoint(const std::string& path, const DenoiserParams<float>& params,
                      const CheckpointHeader& header) {
  const std::string text = header_json(header, params.parameter_count()).dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(kCheckpointMagic, 4);
  const std::uint32_t len = std::uint32_t(text.size());
  unsigned char le[4] = {std::uint8_t(len), std::uint8_t(len >> 8), std::uint8_t(len >> 16),
                         std::uint8_t(len >> 24)};
  f.write(reinterpret_cast<const char*>(le), 4);
  f.write(text.data(), std::streamsize(text.size()));
  params.for_each_block([&](const float* data, Eigen::Index size) {
    f.write(reinterpret_cast<const char*>(data), std::streamsize(size * sizeof(float)));
  });
  if (!f) throw std::runtime_error("failed writing checkpoint " + path);
}

std::pair<DenoiserParams<float>, CheckpointHeader> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[4];
  unsigned char le[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0 ||
      !f.read(reinterpret_cast<char*>(le), 4)) {
    throw FormatError(path + ": not a checkpoint");
  }
  const std::uint32_t len = le[0] | le[1] << 8 | le[2] << 16 | std::uint32_t(le[3]) << 24;
  std::string text(len, '\0');
  if (!f.read(text.data(), len)) throw FormatError(path + ": truncated header");

  CheckpointHeader h;
  std::size_t count = 0;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "aligndiff-checkpoint-v1") throw FormatError("unknown checkpoint format");
    const auto& topo = j.at("topology");
    h.model.grid = topo.at("grid");
    h.model.cond_dim = topo.at("cond_dim");
    h.model.time_dim = topo.at("time_dim");
    h.model.hidden = topo.at("hidden");
    h.target_kind = target_kind_from_string(j.at("target_kind"));
    h.config_hash = j.at("config_hash");
    h.seed = j.at("seed");
    h.schedule_steps = j.at("schedule").at("T");
    h.beta_min = j.at("schedule").at("beta_min");
    h.beta_max = j.at("schedule").at("beta_max");
    count = j.at("parameter_count");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  }
  auto params = DenoiserParams<float>::zeros(h.model);
  if (params.parameter_count() != count) throw FormatError(path + ": parameter count mismatch");
  params.for_each_block([&](float* data, Eigen::Index size) {
    if (!f.read(reinterpret_cast<char*>(data), std::streamsize(size * sizeof(float)))) {
      throw FormatError(path + ": truncated parameters");
    }
  });
  return {std::move(params), h};
}

#define ALIGNDIFF_INSTANTIATE(S)                                                              \
  template struct DenoiserParams<S>;                                                          \
  template DenoiserParams<S> init_params<S>(const ModelConfig&, Rng&);                        \
  template DenoiserParams<S>::Matrix forward_batch<S>(const DenoiserParams<S>&,               \
                                                      const DenoiserParams<S>::Matrix&);      \
  template Activations<S> forward_with_activations<S>(const DenoiserParams<S>&,               \
                                                      DenoiserParams<S>::Matrix);             \
  template DenoiserParams<S> backward<S>(const DenoiserParams<S>&, const Activations<S>&,     \
                                         const DenoiserParams<S>::Matrix&);                   \
  template Sample<S> forward<S>(const DenoiserParams<S>&, const Sample<S>&, const SampleD&,   \
                                const Condition&, int);                                       \
  template void adamw_update<S>(DenoiserParams<S>&, const DenoiserParams<S>&,                 \
                                OptimizerState<S>&, const AdamWConfig&);                      \
  template PreparedBatch<S> prepare_batch<S>(const ModelConfig&, const std::vector<TrainItem>&, \
                                             const TrainConfig&, const NoiseSchedule&, Rng&); \
  template double loss_and_gradient<S>(const DenoiserParams<S>&, const PreparedBatch<S>&,     \
                                       DenoiserParams<S>*);                                   \
  template double train_step<S>(DenoiserParams<S>&, OptimizerState<S>&,                      \
                                const std::vector<TrainItem>&, const TrainConfig&,            \
                                const NoiseSchedule&, Rng&, double);

ALIGNDIFF_INSTANTIATE(float)
ALIGNDIFF_INSTANTIATE(double)

#undef ALIGNDIFF_INSTANTIATE

}  // namespace aligndiff
