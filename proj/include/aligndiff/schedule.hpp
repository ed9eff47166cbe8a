#pragma once

// DDPM noise schedule and the closed-form algebra built on it: forward
// diffusion, clean-sample recovery, the augmentation-corrected noise target
// and the deterministic (eta = 0) DDIM update.
//
// Timestep convention: t = 0 is clean data, t = T is pure noise. All sample
// operations are free functions over Eigen array expressions so they work for
// float and double tensors alike; coefficients are always computed in double.

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "aligndiff/error.hpp"

namespace aligndiff {

/// Flattened channel-major tensor (C x H x W). Holds x0, x_t, eps and x0-hat.
template <typename Scalar>
using Sample = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

using SampleD = Sample<double>;
using SampleF = Sample<float>;

enum class TargetKind { eps, eps_corrected, x0 };

std::string to_string(TargetKind kind);
TargetKind target_kind_from_string(const std::string& name);

class NoiseSchedule {
 public:
  /// Linearly spaced betas from beta_min to beta_max over t = 1..T.
  NoiseSchedule(int T, double beta_min, double beta_max);

  int steps() const { return T_; }
  double beta(int t) const { return betas_[checked(t, 1) - 1]; }
  double alpha(int t) const { return 1.0 - beta(t); }
  /// Cumulative signal retention; alpha_bar(0) == 1.
  double alpha_bar(int t) const { return alpha_bars_[checked(t, 0)]; }

  const Eigen::VectorXd& betas() const { return betas_; }
  /// T + 1 entries indexed by t = 0..T.
  const Eigen::VectorXd& alpha_bars() const { return alpha_bars_; }

  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }

  /// Throws std::out_of_range unless lo <= t <= T.
  int checked(int t, int lo) const {
    if (t < lo || t > T_) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [" +
                              std::to_string(lo) + ", " + std::to_string(T_) +
                              "]");
    }
    return t;
  }

 private:
  int T_;
  double beta_min_;
  double beta_max_;
  Eigen::VectorXd betas_;
  Eigen::VectorXd alpha_bars_;
};

NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

namespace detail {

template <typename A, typename B>
void require_same_size(const Eigen::ArrayBase<A>& a,
                       const Eigen::ArrayBase<B>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("sample sizes differ: " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
}

}  // namespace detail

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename D0, typename DE>
typename D0::PlainObject forward_diffuse(const Eigen::ArrayBase<D0>& x0, int t,
                                         const Eigen::ArrayBase<DE>& eps,
                                         const NoiseSchedule& schedule) {
  using S = typename D0::Scalar;
  detail::require_same_size(x0, eps);
  const double ab = schedule.alpha_bar(schedule.checked(t, 1));
  return S(std::sqrt(ab)) * x0 + S(std::sqrt(1.0 - ab)) * eps.template cast<S>();
}

/// Clean-sample estimate from a noise prediction.
template <typename DX, typename DE>
typename DX::PlainObject predict_x0(const Eigen::ArrayBase<DX>& x_t,
                                    const Eigen::ArrayBase<DE>& eps, int t,
                                    const NoiseSchedule& schedule) {
  using S = typename DX::Scalar;
  detail::require_same_size(x_t, eps);
  const double ab = schedule.alpha_bar(schedule.checked(t, 1));
  const double sa = std::sqrt(ab);
  return S(1.0 / sa) * x_t - S(std::sqrt(1.0 - ab) / sa) * eps.template cast<S>();
}

/// Noise implied by a state and a clean-sample estimate (inverse of predict_x0).
template <typename DX, typename D0>
typename DX::PlainObject predict_eps(const Eigen::ArrayBase<DX>& x_t,
                                     const Eigen::ArrayBase<D0>& x0, int t,
                                     const NoiseSchedule& schedule) {
  using S = typename DX::Scalar;
  detail::require_same_size(x_t, x0);
  const double ab = schedule.alpha_bar(schedule.checked(t, 1));
  if (ab >= 1.0) throw SingularCoefficientError("alpha_bar == 1 has no noise");
  const double s1 = std::sqrt(1.0 - ab);
  return S(1.0 / s1) * x_t - S(std::sqrt(ab) / s1) * x0.template cast<S>();
}

/// eps' = eps + sqrt(abar_t)/sqrt(1 - abar_t) (x0_aug - x0), the noise that
/// explains a state diffused from x0_aug as if it had come from x0.
template <typename D0, typename DA, typename DE>
typename DE::PlainObject corrected_epsilon(const Eigen::ArrayBase<D0>& x0,
                                           const Eigen::ArrayBase<DA>& x0_aug,
                                           const Eigen::ArrayBase<DE>& eps,
                                           int t,
                                           const NoiseSchedule& schedule) {
  using S = typename DE::Scalar;
  detail::require_same_size(x0, eps);
  detail::require_same_size(x0_aug, eps);
  const double ab = schedule.alpha_bar(schedule.checked(t, 1));
  if (ab >= 1.0) throw SingularCoefficientError("alpha_bar == 1 has no noise");
  const double k = std::sqrt(ab) / std::sqrt(1.0 - ab);
  return eps + S(k) * (x0_aug.template cast<S>() - x0.template cast<S>());
}

/// Deterministic DDIM update from t to t_prev. With t_prev == 0 the clean
/// estimate itself is returned.
template <typename DX, typename DM>
typename DX::PlainObject ddim_step(const Eigen::ArrayBase<DX>& x_t,
                                   const Eigen::ArrayBase<DM>& model_out,
                                   TargetKind kind, int t, int t_prev,
                                   const NoiseSchedule& schedule) {
  using S = typename DX::Scalar;
  using Plain = typename DX::PlainObject;
  if (t_prev >= t) {
    throw std::invalid_argument("ddim_step requires t_prev < t (got t=" +
                                std::to_string(t) +
                                ", t_prev=" + std::to_string(t_prev) + ")");
  }
  schedule.checked(t, 1);
  schedule.checked(t_prev, 0);
  detail::require_same_size(x_t, model_out);

  Plain x0_hat;
  Plain eps_hat;
  if (kind == TargetKind::x0) {
    x0_hat = model_out.template cast<S>();
    if (t_prev == 0) return x0_hat;
    eps_hat = predict_eps(x_t, x0_hat, t, schedule);
  } else {
    eps_hat = model_out.template cast<S>();
    x0_hat = predict_x0(x_t, eps_hat, t, schedule);
    if (t_prev == 0) return x0_hat;
  }
  const double ab_prev = schedule.alpha_bar(t_prev);
  return S(std::sqrt(ab_prev)) * x0_hat + S(std::sqrt(1.0 - ab_prev)) * eps_hat;
}

/// Clean estimate implied by a raw model output of the given kind.
template <typename DX, typename DM>
typename DX::PlainObject x0_from_output(const Eigen::ArrayBase<DX>& x_t,
                                        const Eigen::ArrayBase<DM>& model_out,
                                        TargetKind kind, int t,
                                        const NoiseSchedule& schedule) {
  using S = typename DX::Scalar;
  if (kind == TargetKind::x0) return model_out.template cast<S>();
  return predict_x0(x_t, model_out, t, schedule);
}

}  // namespace aligndiff
