#include <doctest.h>

#include <cmath>

#include "aligndiff/augmentation.hpp"
#include "aligndiff/error.hpp"
#include "aligndiff/experiment.hpp"

using namespace aligndiff;

namespace {

struct Painted {
  ToyScene scene;
  Mask mask;
  SampleD target;
};

Painted painted_square(int grid, int cx, int cy, int size) {
  SceneObject o{ShapeClass::square, ColorClass::blue, cx, cy, size, 0};
  Painted p;
  p.scene = ToyScene::from_objects(grid, {o});
  p.mask = p.scene.masks[0];
  p.target = render_target(p.scene, p.mask);
  return p;
}

std::pair<double, double> centroid(const Mask& m, int grid) {
  double x = 0, y = 0, n = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    x += double(i % grid);
    y += double(i / grid);
    n += 1;
  }
  return {x / n, y / n};
}

}  // namespace

TEST_CASE("multiplier zero and disabled spec are bit-identical") {
  const Painted p = painted_square(16, 8, 8, 3);
  AugmentationSpec spec;
  spec.enabled = true;
  spec.intensity_multiplier = 0.0;
  Rng rng(1);
  CHECK((augment(p.target, p.mask, p.scene.image, 16, 1000, 1000, spec, rng) == p.target).all());
  spec.intensity_multiplier = 1.0;
  spec.enabled = false;
  CHECK((augment(p.target, p.mask, p.scene.image, 16, 1000, 1000, spec, rng) == p.target).all());
}

TEST_CASE("vanishing intensity without erasing is the identity") {
  const Painted p = painted_square(16, 8, 8, 3);
  AugmentationSpec spec;
  spec.enabled = true;
  spec.shape = false;
  spec.schedule = IntensitySchedule::linear;
  // s = t/T is smallest at t = 1; with T huge the jitter rounds away.
  Rng rng(2);
  CHECK((augment(p.target, p.mask, p.scene.image, 16, 1, 1000000, spec, rng) - p.target).abs().maxCoeff() < 1e-5);
}

TEST_CASE("empty mask and bad arguments") {
  const Painted p = painted_square(16, 8, 8, 3);
  AugmentationSpec spec;
  spec.enabled = true;
  Rng rng(3);
  const Mask none = Mask::Zero(256);
  CHECK((augment(p.target, none, p.scene.image, 16, 500, 1000, spec, rng) == p.target).all());
  CHECK_THROWS_AS(augment(p.target, p.mask, p.scene.image, 16, 0, 1000, spec, rng), std::out_of_range);
  CHECK_THROWS_AS(augment(p.target, p.mask, p.scene.image, 16, 1001, 1000, spec, rng), std::out_of_range);
  CHECK_THROWS_AS(augment(p.target, Mask::Zero(10), p.scene.image, 16, 5, 1000, spec, rng), ShapeError);
}

TEST_CASE("location jitter stays inside its geometric bounds at t = T") {
  const int G = 32;
  const Painted p = painted_square(G, 16, 16, 6);
  const double area = p.mask.cast<double>().sum();
  const auto [cx, cy] = centroid(p.mask, G);
  AugmentationSpec spec;
  spec.enabled = true;
  spec.color = false;
  spec.shape = false;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto [img, moved] = augment_with_mask(p.target, p.mask, p.scene.image, G, 1000, 1000, spec, rng);
    const auto [mx, my] = centroid(moved, G);
    // Translation bound per axis plus half a pixel of nearest-neighbor rounding.
    CHECK(std::abs(mx - cx) <= 0.05 * G + 0.5);
    CHECK(std::abs(my - cy) <= 0.05 * G + 0.5);
    const double ratio = moved.cast<double>().sum() / area;
    // Scale bounds, widened by the boundary pixels rotation can add or drop.
    const double edge = 4.0 * 13.0 / area;
    CHECK(ratio >= 0.95 * 0.95 * 0.95 - edge);
    CHECK(ratio <= 1.05 * 1.05 + edge);
    CHECK((extract_mask(img) == moved).all());
  }
}

TEST_CASE("erased fraction follows erase_frac_range") {
  const Painted p = painted_square(16, 8, 8, 5);
  const long long area = p.mask.cast<long long>().sum();
  AugmentationSpec spec;
  spec.enabled = true;
  spec.color = false;
  spec.location = false;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto [img, kept] = augment_with_mask(p.target, p.mask, p.scene.image, 16, 700, 1000, spec, rng);
    const long long removed = area - kept.cast<long long>().sum();
    CHECK(removed >= std::llround(0.01 * double(area)));
    CHECK(removed <= std::llround(0.05 * double(area)));
    CHECK(((kept.cast<int>() - p.mask.cast<int>()) <= 0).all());
    // Vacated pixels show the clean scene again.
    for (Eigen::Index i = 0; i < kept.size(); ++i) {
      if (p.mask[i] && !kept[i]) CHECK(img[i] == p.scene.image[i]);
    }
  }
}

TEST_CASE("augmentation is deterministic for a seed") {
  const Painted p = painted_square(16, 7, 9, 3);
  AugmentationSpec spec;
  spec.enabled = true;
  Rng a(42), b(42);
  CHECK((augment(p.target, p.mask, p.scene.image, 16, 640, 1000, spec, a) ==
         augment(p.target, p.mask, p.scene.image, 16, 640, 1000, spec, b)).all());
}

TEST_CASE("expected corruption grows with t under the linear schedule") {
  const Painted p = painted_square(16, 8, 8, 3);
  AugmentationSpec spec;
  spec.enabled = true;
  spec.shape = false;  // erasing is not scaled by t
  Eigen::VectorXd ts(10), dist(10);
  for (int k = 0; k < 10; ++k) {
    const int t = 100 * (k + 1);
    double acc = 0.0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      Rng rng(derive_seed(seed, t));
      acc += (augment(p.target, p.mask, p.scene.image, 16, t, 1000, spec, rng) - p.target).matrix().norm();
    }
    ts[k] = t;
    dist[k] = acc / 1000.0;
  }
  CHECK(spearman(ts, dist) >= 0.95);
}

TEST_CASE("gaussian kernel and blur") {
  const Eigen::ArrayXd k = gaussian_kernel(2.0, 31);
  CHECK(k.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(gaussian_kernel(2.0, 4), ConfigError);

  const SampleD flat = SampleD::Constant(256, 0.37);
  CHECK((gaussian_blur_sigma(flat, 16, 3.0, 31) - 0.37).abs().maxCoeff() < 1e-12);

  const int G = 32;
  SampleD impulse = SampleD::Zero(G * G);
  impulse[16 * G + 16] = 1.0;
  const SampleD out = gaussian_blur_sigma(impulse, G, 2.0, 31);
  CHECK(out.sum() == doctest::Approx(1.0).epsilon(1e-6));
  double z = 0.0;
  for (int dy = -15; dy <= 15; ++dy) {
    for (int dx = -15; dx <= 15; ++dx) z += std::exp(-(dx * dx + dy * dy) / 8.0);
  }
  CHECK(out[16 * G + 16] == doctest::Approx(1.0 / z).epsilon(1e-6));

  AugmentationSpec spec;
  spec.blur_sigma_max = 0.0;
  Rng rng(1);
  CHECK((gaussian_blur(impulse, G, 500, 1000, spec, rng) == impulse).all());
  CHECK_THROWS_AS(gaussian_blur(SampleD::Zero(3 * 256), 16, 5, 10, spec, rng), ShapeError);
}

TEST_CASE("spec validation") {
  AugmentationSpec spec;
  spec.validate();
  spec.blur_kernel = 30;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = {};
  spec.erase_frac_range = {0.2, 0.1};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = {};
  spec.color_max = -1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  CHECK(intensity_schedule_from_string("constant") == IntensitySchedule::constant);
}
