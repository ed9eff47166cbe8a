#include "aligndiff/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "aligndiff/error.hpp"

namespace aligndiff {

std::string to_string(IntensitySchedule s) {
  return s == IntensitySchedule::linear ? "linear" : "constant";
}

IntensitySchedule intensity_schedule_from_string(const std::string& name) {
  if (name == "linear") return IntensitySchedule::linear;
  if (name == "constant") return IntensitySchedule::constant;
  throw ConfigError("unknown intensity schedule '" + name + "'");
}

double AugmentationSpec::intensity(int t, int T) const {
  if (schedule == IntensitySchedule::constant) return intensity_multiplier;
  return intensity_multiplier * double(t) / double(T);
}

void AugmentationSpec::validate() const {
  if (intensity_multiplier < 0.0 || color_max < 0.0 || rotate_max_deg < 0.0 ||
      translate_max_frac < 0.0 || blur_sigma_max < 0.0) {
    throw ConfigError("augmentation maxima must be non-negative");
  }
  if (scale_range.first <= 0.0 || scale_range.first > scale_range.second) {
    throw ConfigError("augmentation scale_range must be positive and ordered");
  }
  if (erase_frac_range.first < 0.0 || erase_frac_range.second > 1.0 ||
      erase_frac_range.first > erase_frac_range.second) {
    throw ConfigError("erase_frac_range must lie within [0, 1]");
  }
  if (blur_kernel < 1 || blur_kernel % 2 == 0) throw ConfigError("blur_kernel must be odd");
}

namespace {

// Axis-aligned rectangles are carved out of the mask until `target` pixels
// are gone; the last rectangle is consumed in scan order to hit it exactly.
void erase_rectangles(Mask& mask, int grid, long long target, Rng& rng) {
  std::vector<int> on;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    if (mask[i]) on.push_back(int(i));
  }
  long long removed = 0;
  for (int attempt = 0; removed < target && attempt < 64; ++attempt) {
    std::vector<int> live;
    for (int i : on) {
      if (mask[i]) live.push_back(i);
    }
    if (live.empty()) break;
    const int seed = live[std::uniform_int_distribution<std::size_t>(0, live.size() - 1)(rng)];
    const long long remaining = target - removed;
    const double aspect = std::exp(uniform(rng, std::log(0.5), std::log(2.0)));
    const int w = std::max(1, int(std::lround(std::sqrt(double(remaining) * aspect))));
    const int h = std::max(1, int(std::lround(double(remaining) / w)));
    const int x0 = std::clamp(seed % grid - w / 2, 0, grid - 1);
    const int y0 = std::clamp(seed / grid - h / 2, 0, grid - 1);
    for (int y = y0; y < std::min(grid, y0 + h) && removed < target; ++y) {
      for (int x = x0; x < std::min(grid, x0 + w) && removed < target; ++x) {
        if (mask[y * grid + x]) {
          mask[y * grid + x] = 0;
          ++removed;
        }
      }
    }
  }
}

}  // namespace

std::pair<SampleD, Mask> augment_with_mask(const SampleD& x0, const Mask& mask,
                                           const SampleD& background, int grid,
                                           int t, int T,
                                           const AugmentationSpec& spec, Rng& rng) {
  const Eigen::Index plane = Eigen::Index(grid) * grid;
  if (x0.size() != 3 * plane || background.size() != 3 * plane || mask.size() != plane) {
    throw ShapeError("augment expects 3 x G x G targets and a G x G mask");
  }
  if (t < 1 || t > T) throw std::out_of_range("augment: timestep outside [1, T]");
  const long long area = mask.cast<long long>().sum();
  if (!spec.enabled || area == 0 || spec.intensity_multiplier == 0.0) return {x0, mask};

  const double s = spec.intensity(t, T);

  // Paint layer: the target colors at painted pixels.
  SampleD paint = x0;
  if (spec.color) {
    const double m = uniform(rng, 0.0, spec.color_max * s);
    for (int c = 0; c < 3; ++c) {
      const double gain = 1.0 + m * uniform(rng, -1.0, 1.0);
      const double offset = m * uniform(rng, -1.0, 1.0);
      auto ch = paint.segment(c * plane, plane);
      ch = (gain * ch + offset).cwiseMax(-1.0).cwiseMin(1.0);
    }
  }

  Mask moved = mask;
  SampleD moved_paint = paint;
  if (spec.location) {
    const double deg = spec.rotate_max_deg * s;
    const double theta = uniform(rng, -deg, deg) * std::numbers::pi / 180.0;
    const double shift = spec.translate_max_frac * s * grid;
    const double tx = uniform(rng, -shift, shift);
    const double ty = uniform(rng, -shift, shift);
    const double lo = 1.0 + (spec.scale_range.first - 1.0) * s;
    const double hi = 1.0 + (spec.scale_range.second - 1.0) * s;
    const double scale = lo < hi ? uniform(rng, lo, hi) : lo;

    double cx = 0.0, cy = 0.0;
    for (Eigen::Index i = 0; i < plane; ++i) {
      if (!mask[i]) continue;
      cx += double(i % grid);
      cy += double(i / grid);
    }
    cx /= double(area);
    cy /= double(area);

    // Inverse map: destination pixel -> source pixel (nearest neighbor).
    const double c = std::cos(theta), sn = std::sin(theta);
    moved.setZero();
    for (int y = 0; y < grid; ++y) {
      for (int x = 0; x < grid; ++x) {
        const double dx = (x - cx - tx) / scale;
        const double dy = (y - cy - ty) / scale;
        const int sx = int(std::lround(cx + c * dx + sn * dy));
        const int sy = int(std::lround(cy - sn * dx + c * dy));
        if (sx < 0 || sy < 0 || sx >= grid || sy >= grid) continue;
        const Eigen::Index src = Eigen::Index(sy) * grid + sx;
        const Eigen::Index dst = Eigen::Index(y) * grid + x;
        if (!mask[src]) continue;
        moved[dst] = 1;
        for (int ch = 0; ch < 3; ++ch) moved_paint[ch * plane + dst] = paint[ch * plane + src];
      }
    }
  }

  if (spec.shape) {
    const double frac = uniform(rng, spec.erase_frac_range.first, spec.erase_frac_range.second);
    const long long moved_area = moved.cast<long long>().sum();
    erase_rectangles(moved, grid, std::llround(frac * double(moved_area)), rng);
  }

  SampleD out = background;
  for (Eigen::Index i = 0; i < plane; ++i) {
    if (!moved[i]) continue;
    for (int ch = 0; ch < 3; ++ch) out[ch * plane + i] = moved_paint[ch * plane + i];
  }
  return {out, moved};
}

SampleD augment(const SampleD& x0, const Mask& mask, const SampleD& background,
                int grid, int t, int T, const AugmentationSpec& spec, Rng& rng) {
  return augment_with_mask(x0, mask, background, grid, t, T, spec, rng).first;
}

Eigen::ArrayXd gaussian_kernel(double sigma, int size) {
  if (size < 1 || size % 2 == 0) throw ConfigError("kernel size must be odd");
  const int r = size / 2;
  Eigen::ArrayXd k(size);
  for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  return k / k.sum();
}

SampleD gaussian_blur_sigma(const SampleD& field, int grid, double sigma, int kernel) {
  const Eigen::Index plane = Eigen::Index(grid) * grid;
  if (field.size() != plane) throw ShapeError("gaussian_blur expects a single-channel field");
  if (!(sigma > 0.0)) return field;
  const int r = std::min(kernel / 2, grid - 1);
  const Eigen::ArrayXd k = gaussian_kernel(sigma, 2 * r + 1);
  auto reflect = [grid](int i) {
    if (i < 0) return -i;
    if (i >= grid) return 2 * (grid - 1) - i;
    return i;
  };
  SampleD tmp(plane), out(plane);
  for (int y = 0; y < grid; ++y) {
    for (int x = 0; x < grid; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) acc += k[j + r] * field[y * grid + reflect(x + j)];
      tmp[y * grid + x] = acc;
    }
  }
  for (int y = 0; y < grid; ++y) {
    for (int x = 0; x < grid; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) acc += k[j + r] * tmp[reflect(y + j) * grid + x];
      out[y * grid + x] = acc;
    }
  }
  return out;
}

SampleD gaussian_blur(const SampleD& field, int grid, int t, int T,
                      const AugmentationSpec& spec, Rng& rng) {
  if (field.size() != Eigen::Index(grid) * grid) {
    throw ShapeError("gaussian_blur expects a single-channel field");
  }
  if (t < 1 || t > T) throw std::out_of_range("gaussian_blur: timestep outside [1, T]");
  const double hi = spec.blur_sigma_max * double(t) / double(T) * spec.intensity_multiplier;
  const double sigma = hi > 0.0 ? uniform(rng, 0.0, hi) : 0.0;
  return gaussian_blur_sigma(field, grid, sigma, spec.blur_kernel);
}

}  // namespace aligndiff
