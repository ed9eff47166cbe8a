#pragma once

// Timestep-dependent corruption of training targets. Earlier timesteps
// (closer to t = T) get stronger corruption under the linear schedule, which
// imitates the coarse, drifting predictions a sampler actually passes through.

#include <string>
#include <utility>

#include "aligndiff/random.hpp"
#include "aligndiff/toytask.hpp"

namespace aligndiff {

enum class IntensitySchedule { linear, constant };

std::string to_string(IntensitySchedule s);
IntensitySchedule intensity_schedule_from_string(const std::string& name);

struct AugmentationSpec {
  bool enabled = false;
  double intensity_multiplier = 1.0;
  IntensitySchedule schedule = IntensitySchedule::linear;

  bool color = true;
  bool location = true;
  bool shape = true;
  bool blur = true;

  double color_max = 0.2;
  double rotate_max_deg = 10.0;
  double translate_max_frac = 0.05;
  std::pair<double, double> scale_range{0.95, 1.05};
  std::pair<double, double> erase_frac_range{0.01, 0.05};
  int blur_kernel = 31;
  double blur_sigma_max = 10.0;

  /// s = multiplier * t / T (linear) or multiplier (constant).
  double intensity(int t, int T) const;
  void validate() const;
};

/// Corrupt a mask-painted target. `background` is the clean scene the paint
/// sits on; pixels vacated by the moved or erased mask are restored from it.
/// Returns x0 unchanged for an empty mask, a disabled spec or a zero
/// multiplier.
SampleD augment(const SampleD& x0, const Mask& mask, const SampleD& background,
                int grid, int t, int T, const AugmentationSpec& spec, Rng& rng);

/// Same as augment, also returning the mask the corrupted paint occupies.
std::pair<SampleD, Mask> augment_with_mask(const SampleD& x0, const Mask& mask,
                                           const SampleD& background, int grid,
                                           int t, int T,
                                           const AugmentationSpec& spec, Rng& rng);

/// Normalized 1-D Gaussian taps of the given odd length.
Eigen::ArrayXd gaussian_kernel(double sigma, int size);

/// Separable Gaussian blur with reflective borders; kernel clipped to the grid.
SampleD gaussian_blur_sigma(const SampleD& field, int grid, double sigma, int kernel);

/// Blur a single-channel field with sigma ~ U[0, sigma_max * t/T * multiplier].
SampleD gaussian_blur(const SampleD& field, int grid, int t, int T,
                      const AugmentationSpec& spec, Rng& rng);

}  // namespace aligndiff
