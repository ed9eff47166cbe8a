#pragma once

// Synthetic referring-segmentation world: small grids of colored shapes, a
// structured referring condition, the "paint the target red" rendering, the
// color-threshold mask readout and the segmentation / depth metrics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "aligndiff/random.hpp"
#include "aligndiff/schedule.hpp"

namespace aligndiff {

/// Binary mask, row-major G x G.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

enum class ShapeClass { square, cross, disk };
enum class ColorClass { red, green, blue };
enum class Qualifier { any, left, right, top, bottom };

inline constexpr int kShapeCount = 3;
inline constexpr int kColorCount = 3;
inline constexpr int kQualifierCount = 5;
inline constexpr int kConditionDim = kShapeCount + kColorCount + kQualifierCount;

std::string to_string(ShapeClass s);
std::string to_string(ColorClass c);
std::string to_string(Qualifier q);
ShapeClass shape_from_string(const std::string& s);
ColorClass color_from_string(const std::string& s);
Qualifier qualifier_from_string(const std::string& s);

/// RGB value in [-1, 1] used to draw objects of a color class.
Eigen::Vector3d palette(ColorClass c);
/// The paint color of the target mask (red analog).
inline Eigen::Vector3d mask_anchor() { return {1.0, -1.0, -1.0}; }

struct SceneObject {
  ShapeClass shape = ShapeClass::square;
  ColorClass color = ColorClass::red;
  int cx = 0;
  int cy = 0;
  int size = 2;
  int z_order = 0;
};

/// Pixels covered by an object drawn alone on a grid of side `grid`.
Mask rasterize(const SceneObject& obj, int grid);

struct ToyScene {
  int grid = 16;
  /// 3 x G x G image in [-1, 1], channel-major.
  SampleD image;
  std::vector<SceneObject> objects;
  /// Visible pixels of each object after z-order occlusion.
  std::vector<Mask> masks;

  /// Re-render image and visible masks from the object list.
  static ToyScene from_objects(int grid, std::vector<SceneObject> objects);
};

/// Referring descriptor. The empty condition (phi) encodes as all zeros.
struct Condition {
  std::optional<ShapeClass> shape;
  std::optional<ColorClass> color;
  Qualifier qualifier = Qualifier::any;
  bool negated = false;
  bool null = false;

  static Condition empty() {
    Condition c;
    c.null = true;
    return c;
  }

  Eigen::VectorXd encode() const;
  std::string describe() const;
  bool operator==(const Condition& o) const {
    return shape == o.shape && color == o.color && qualifier == o.qualifier &&
           null == o.null;
  }
};

/// Index of the single object a condition refers to, if it is unique.
std::optional<int> resolve(const ToyScene& scene, const Condition& cond,
                           int qualifier_margin = 2);

/// Objects whose shape/color attributes match the condition, ignoring the
/// spatial qualifier.
std::vector<int> attribute_matches(const ToyScene& scene, const Condition& cond);

struct TaskConfig {
  int grid = 16;
  int min_objects = 2;
  int max_objects = 4;
  int min_size = 2;
  int max_size = 3;
  std::vector<ShapeClass> shapes{ShapeClass::square, ShapeClass::cross,
                                 ShapeClass::disk};
  std::vector<ColorClass> colors{ColorClass::red, ColorClass::green,
                                 ColorClass::blue};
  std::vector<Qualifier> qualifiers{Qualifier::any, Qualifier::left,
                                    Qualifier::right, Qualifier::top,
                                    Qualifier::bottom};
  /// Fraction of an object's pixels that must stay visible.
  double min_visible_fraction = 0.6;
  int qualifier_margin = 2;
  /// Require at least this many distractors sharing color or shape with the
  /// target (hard split when >= 2).
  int min_sharing_distractors = 0;
  int retry_budget = 500;

  void validate() const;
};

struct Example {
  ToyScene scene;
  Condition condition;
  int target = 0;
  Mask truth;
  std::uint64_t seed = 0;
};

/// Random scene plus a condition that uniquely identifies one object.
/// Throws GenerationError once the retry budget is spent.
Example generate_scene(const TaskConfig& config, Rng& rng);
Example generate_scene(const TaskConfig& config, std::uint64_t seed);

/// Distractors sharing color or shape with the target.
int sharing_distractors(const ToyScene& scene, int target);

/// Scene image with the masked pixels painted in the anchor color.
SampleD render_target(const ToyScene& scene, const Mask& mask);

struct MaskExtractionConfig {
  Eigen::Vector3d anchor = mask_anchor();
  double delta = 0.4;
};

/// Pixels whose color lies within delta (Euclidean) of the anchor.
template <typename Derived>
Mask extract_mask(const Eigen::ArrayBase<Derived>& image,
                  const MaskExtractionConfig& cfg = {}) {
  const Eigen::Index n = image.size() / 3;
  if (image.size() != 3 * n) throw ShapeError("extract_mask needs 3 channels");
  Mask m(n);
  const double d2 = cfg.delta * cfg.delta;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = double(image[i]) - cfg.anchor[0];
    const double g = double(image[n + i]) - cfg.anchor[1];
    const double b = double(image[2 * n + i]) - cfg.anchor[2];
    m[i] = (r * r + g * g + b * b) <= d2 ? 1 : 0;
  }
  return m;
}

struct OverlapCounts {
  long long intersection = 0;
  long long union_ = 0;
};
OverlapCounts overlap(const Mask& predicted, const Mask& truth);

/// Single-sample IoU with the oIoU degenerate rule.
double iou(const Mask& predicted, const Mask& truth);

/// Overall IoU: summed intersections over summed unions. An all-empty union
/// scores 1 when every prediction is empty too, otherwise 0.
double oiou(const std::vector<Mask>& predicted, const std::vector<Mask>& truth);

struct DepthScores {
  double abs_rel = 0.0;
  double delta1 = 0.0;
};

/// AbsRel and delta1 after least-squares affine alignment of the prediction
/// (mean matching when the prediction is constant). Truth must be positive.
DepthScores depth_metrics(const Eigen::ArrayXd& predicted,
                          const Eigen::ArrayXd& truth, bool align = true);

/// Positive depth proxy for a scene: planar background gradient with objects
/// in front, nearer the higher their z-order. Single channel G x G.
Eigen::ArrayXd scene_depth(const ToyScene& scene);
/// Maps positive depth in [0.2, 1.2] to the [-1, 1] sample convention.
SampleD depth_to_sample(const Eigen::ArrayXd& depth);
Eigen::ArrayXd sample_to_depth(const SampleD& sample);

struct Dataset {
  TaskConfig config;
  std::uint64_t base_seed = 0;
  std::vector<Example> items;
};

Dataset generate_dataset(const TaskConfig& config, int count,
                         std::uint64_t base_seed);

/// Writes index.json, images.bin and masks.bin under dir.
void write_dataset(const std::string& dir, const Dataset& data);
Dataset read_dataset(const std::string& dir);

}  // namespace aligndiff
