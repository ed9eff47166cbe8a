#include "aligndiff/toytask.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "aligndiff/error.hpp"
#include "aligndiff/io.hpp"
#include "json_io.hpp"

namespace aligndiff {

std::string to_string(ShapeClass s) {
  switch (s) {
    case ShapeClass::square:
      return "square";
    case ShapeClass::cross:
      return "cross";
    case ShapeClass::disk:
      return "disk";
  }
  return "square";
}

std::string to_string(ColorClass c) {
  switch (c) {
    case ColorClass::red:
      return "red";
    case ColorClass::green:
      return "green";
    case ColorClass::blue:
      return "blue";
  }
  return "red";
}

std::string to_string(Qualifier q) {
  switch (q) {
    case Qualifier::any:
      return "any";
    case Qualifier::left:
      return "left";
    case Qualifier::right:
      return "right";
    case Qualifier::top:
      return "top";
    case Qualifier::bottom:
      return "bottom";
  }
  return "any";
}

ShapeClass shape_from_string(const std::string& s) {
  if (s == "square") return ShapeClass::square;
  if (s == "cross") return ShapeClass::cross;
  if (s == "disk") return ShapeClass::disk;
  throw ConfigError("unknown shape '" + s + "'");
}

ColorClass color_from_string(const std::string& s) {
  if (s == "red") return ColorClass::red;
  if (s == "green") return ColorClass::green;
  if (s == "blue") return ColorClass::blue;
  throw ConfigError("unknown color '" + s + "'");
}

Qualifier qualifier_from_string(const std::string& s) {
  if (s == "any") return Qualifier::any;
  if (s == "left") return Qualifier::left;
  if (s == "right") return Qualifier::right;
  if (s == "top") return Qualifier::top;
  if (s == "bottom") return Qualifier::bottom;
  throw ConfigError("unknown qualifier '" + s + "'");
}

Eigen::Vector3d palette(ColorClass c) {
  switch (c) {
    case ColorClass::red:
      return {0.3, -0.7, -0.7};
    case ColorClass::green:
      return {-0.7, 0.3, -0.7};
    case ColorClass::blue:
      return {-0.7, -0.7, 0.3};
  }
  return {0.0, 0.0, 0.0};
}

Mask rasterize(const SceneObject& obj, int grid) {
  Mask m = Mask::Zero(Eigen::Index(grid) * grid);
  const int r = obj.size;
  const int arm = r / 3;
  for (int y = std::max(0, obj.cy - r); y <= std::min(grid - 1, obj.cy + r); ++y) {
    for (int x = std::max(0, obj.cx - r); x <= std::min(grid - 1, obj.cx + r); ++x) {
      const int dx = std::abs(x - obj.cx);
      const int dy = std::abs(y - obj.cy);
      bool inside = false;
      switch (obj.shape) {
        case ShapeClass::square:
          inside = true;
          break;
        case ShapeClass::cross:
          inside = dx <= arm || dy <= arm;
          break;
        case ShapeClass::disk:
          inside = dx * dx + dy * dy <= r * r + r;
          break;
      }
      if (inside) m[y * grid + x] = 1;
    }
  }
  return m;
}

namespace {

constexpr double kBackground = -0.3;
constexpr double kBackgroundTilt = 0.15;

SampleD background_image(int grid) {
  const Eigen::Index plane = Eigen::Index(grid) * grid;
  SampleD img(3 * plane);
  for (int y = 0; y < grid; ++y) {
    const double v = kBackground + kBackgroundTilt * (double(y) / (grid - 1) - 0.5);
    for (int c = 0; c < 3; ++c) {
      img.segment(c * plane + Eigen::Index(y) * grid, grid).setConstant(v);
    }
  }
  return img;
}

}  // namespace

ToyScene ToyScene::from_objects(int grid, std::vector<SceneObject> objects) {
  ToyScene scene;
  scene.grid = grid;
  scene.objects = std::move(objects);
  scene.image = background_image(grid);
  const Eigen::Index plane = Eigen::Index(grid) * grid;

  std::vector<int> order(scene.objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scene.objects[a].z_order < scene.objects[b].z_order;
  });

  // owner[i] = topmost object covering pixel i, or -1.
  std::vector<int> owner(plane, -1);
  for (int idx : order) {
    const Mask m = rasterize(scene.objects[idx], grid);
    const Eigen::Vector3d col = palette(scene.objects[idx].color);
    for (Eigen::Index i = 0; i < plane; ++i) {
      if (!m[i]) continue;
      owner[i] = idx;
      for (int c = 0; c < 3; ++c) scene.image[c * plane + i] = col[c];
    }
  }
  scene.masks.assign(scene.objects.size(), Mask::Zero(plane));
  for (Eigen::Index i = 0; i < plane; ++i) {
    if (owner[i] >= 0) scene.masks[owner[i]][i] = 1;
  }
  return scene;
}

Eigen::VectorXd Condition::encode() const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(kConditionDim);
  if (null) return v;
  if (shape) v[int(*shape)] = 1.0;
  if (color) v[kShapeCount + int(*color)] = 1.0;
  v[kShapeCount + kColorCount + int(qualifier)] = 1.0;
  return v;
}

std::string Condition::describe() const {
  if (null) return "<empty>";
  std::string out;
  if (qualifier != Qualifier::any) out += to_string(qualifier) + " ";
  if (color) out += to_string(*color) + " ";
  out += shape ? to_string(*shape) : std::string("object");
  return out;
}

std::vector<int> attribute_matches(const ToyScene& scene, const Condition& cond) {
  std::vector<int> out;
  if (cond.null) return out;
  for (int i = 0; i < int(scene.objects.size()); ++i) {
    const auto& o = scene.objects[i];
    if (cond.shape && *cond.shape != o.shape) continue;
    if (cond.color && *cond.color != o.color) continue;
    out.push_back(i);
  }
  return out;
}

std::optional<int> resolve(const ToyScene& scene, const Condition& cond,
                           int qualifier_margin) {
  const std::vector<int> cands = attribute_matches(scene, cond);
  if (cands.empty()) return std::nullopt;
  if (cond.qualifier == Qualifier::any) {
    if (cands.size() == 1) return cands.front();
    return std::nullopt;
  }
  // Signed coordinate that the qualifier minimizes.
  auto key = [&](int i) {
    const auto& o = scene.objects[i];
    switch (cond.qualifier) {
      case Qualifier::left:
        return o.cx;
      case Qualifier::right:
        return -o.cx;
      case Qualifier::top:
        return o.cy;
      case Qualifier::bottom:
        return -o.cy;
      case Qualifier::any:
        break;
    }
    return 0;
  };
  int best = cands.front();
  for (int i : cands) {
    if (key(i) < key(best)) best = i;
  }
  for (int i : cands) {
    if (i != best && key(i) - key(best) < qualifier_margin) return std::nullopt;
  }
  return best;
}

void TaskConfig::validate() const {
  if (grid < 8) throw ConfigError("task grid must be >= 8");
  if (min_objects < 1 || max_objects < min_objects) {
    throw ConfigError("invalid object count range");
  }
  if (min_size < 1 || max_size < min_size || 2 * max_size + 1 > grid) {
    throw ConfigError("invalid object size range");
  }
  if (shapes.empty() || colors.empty() || qualifiers.empty()) {
    throw ConfigError("shape, color and qualifier vocabularies must be non-empty");
  }
  if (min_visible_fraction < 0.0 || min_visible_fraction > 1.0) {
    throw ConfigError("min_visible_fraction must lie in [0, 1]");
  }
  if (retry_budget < 1) throw ConfigError("retry_budget must be positive");
}

int sharing_distractors(const ToyScene& scene, int target) {
  int n = 0;
  const auto& t = scene.objects[target];
  for (int i = 0; i < int(scene.objects.size()); ++i) {
    if (i == target) continue;
    const auto& o = scene.objects[i];
    if (o.color == t.color || o.shape == t.shape) ++n;
  }
  return n;
}

Example generate_scene(const TaskConfig& config, Rng& rng) {
  config.validate();
  const int G = config.grid;
  auto pick = [&](const auto& vocab) {
    return vocab[std::uniform_int_distribution<std::size_t>(0, vocab.size() - 1)(rng)];
  };

  for (int attempt = 0; attempt < config.retry_budget; ++attempt) {
    const int count =
        std::uniform_int_distribution<int>(config.min_objects, config.max_objects)(rng);
    std::vector<SceneObject> objs(count);
    std::vector<int> z(count);
    std::iota(z.begin(), z.end(), 0);
    std::shuffle(z.begin(), z.end(), rng);
    for (int i = 0; i < count; ++i) {
      auto& o = objs[i];
      o.shape = pick(config.shapes);
      o.color = pick(config.colors);
      o.size = std::uniform_int_distribution<int>(config.min_size, config.max_size)(rng);
      o.cx = std::uniform_int_distribution<int>(o.size, G - 1 - o.size)(rng);
      o.cy = std::uniform_int_distribution<int>(o.size, G - 1 - o.size)(rng);
      o.z_order = z[i];
    }
    ToyScene scene = ToyScene::from_objects(G, objs);

    bool visible = true;
    for (int i = 0; i < count && visible; ++i) {
      const double full = double(rasterize(objs[i], G).cast<int>().sum());
      const double seen = double(scene.masks[i].cast<int>().sum());
      visible = seen > 0 && seen >= config.min_visible_fraction * full;
    }
    if (!visible) continue;

    std::vector<int> targets(count);
    std::iota(targets.begin(), targets.end(), 0);
    std::shuffle(targets.begin(), targets.end(), rng);
    for (int target : targets) {
      if (sharing_distractors(scene, target) < config.min_sharing_distractors) continue;
      const auto& t = scene.objects[target];
      std::vector<Condition> valid;
      for (int use_shape = 0; use_shape < 2; ++use_shape) {
        for (int use_color = 0; use_color < 2; ++use_color) {
          for (Qualifier q : config.qualifiers) {
            Condition c;
            if (use_shape) c.shape = t.shape;
            if (use_color) c.color = t.color;
            c.qualifier = q;
            const auto hit = resolve(scene, c, config.qualifier_margin);
            if (hit && *hit == target) valid.push_back(c);
          }
        }
      }
      if (valid.empty()) continue;
      Example ex;
      ex.condition = pick(valid);
      ex.target = target;
      ex.truth = scene.masks[target];
      ex.scene = std::move(scene);
      return ex;
    }
  }
  throw GenerationError("no uniquely referable scene within " +
                        std::to_string(config.retry_budget) + " attempts");
}

Example generate_scene(const TaskConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  Example ex = generate_scene(config, rng);
  ex.seed = seed;
  return ex;
}

SampleD render_target(const ToyScene& scene, const Mask& mask) {
  const Eigen::Index plane = Eigen::Index(scene.grid) * scene.grid;
  if (mask.size() != plane) throw ShapeError("render_target: mask size mismatch");
  SampleD out = scene.image;
  const Eigen::Vector3d a = mask_anchor();
  for (Eigen::Index i = 0; i < plane; ++i) {
    if (!mask[i]) continue;
    for (int c = 0; c < 3; ++c) out[c * plane + i] = a[c];
  }
  return out;
}

OverlapCounts overlap(const Mask& predicted, const Mask& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("overlap: mask size mismatch");
  OverlapCounts c;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    const bool p = predicted[i] != 0;
    const bool g = truth[i] != 0;
    c.intersection += (p && g);
    c.union_ += (p || g);
  }
  return c;
}

double iou(const Mask& predicted, const Mask& truth) {
  const OverlapCounts c = overlap(predicted, truth);
  if (c.union_ == 0) return 1.0;
  return double(c.intersection) / double(c.union_);
}

double oiou(const std::vector<Mask>& predicted, const std::vector<Mask>& truth) {
  if (predicted.size() != truth.size() || predicted.empty()) {
    throw ShapeError("oiou needs aligned, non-empty mask lists");
  }
  long long inter = 0;
  long long uni = 0;
  bool any_prediction = false;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const OverlapCounts c = overlap(predicted[i], truth[i]);
    inter += c.intersection;
    uni += c.union_;
    any_prediction = any_prediction || (predicted[i] != 0).any();
  }
  if (uni == 0) return any_prediction ? 0.0 : 1.0;
  return double(inter) / double(uni);
}

DepthScores depth_metrics(const Eigen::ArrayXd& predicted,
                          const Eigen::ArrayXd& truth, bool align) {
  if (predicted.size() != truth.size() || truth.size() == 0) {
    throw ShapeError("depth_metrics: fields differ in size");
  }
  if ((truth <= 0.0).any()) throw std::domain_error("depth truth must be positive");

  Eigen::ArrayXd p = predicted;
  if (align) {
    const double pm = predicted.mean();
    const double gm = truth.mean();
    const double var = (predicted - pm).square().sum();
    if (var > 1e-12 * std::max(1.0, pm * pm) * double(predicted.size())) {
      const double scale = ((predicted - pm) * (truth - gm)).sum() / var;
      p = scale * (predicted - pm) + gm;
    } else {
      p = Eigen::ArrayXd::Constant(predicted.size(), gm);
    }
  }

  DepthScores s;
  s.abs_rel = ((p - truth).abs() / truth).mean();
  long long hits = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    const double ratio = std::max(p[i] / truth[i], truth[i] / p[i]);
    hits += ratio < 1.25;
  }
  s.delta1 = double(hits) / double(p.size());
  return s;
}

Eigen::ArrayXd scene_depth(const ToyScene& scene) {
  const int G = scene.grid;
  Eigen::ArrayXd d(Eigen::Index(G) * G);
  for (int y = 0; y < G; ++y) {
    for (int x = 0; x < G; ++x) d[y * G + x] = 1.2 - 0.4 * double(y) / (G - 1);
  }
  const int n = int(scene.objects.size());
  for (int i = 0; i < n; ++i) {
    const double depth = 0.3 + 0.4 * double(n - 1 - scene.objects[i].z_order) / std::max(1, n - 1);
    for (Eigen::Index k = 0; k < d.size(); ++k) {
      if (scene.masks[i][k]) d[k] = depth;
    }
  }
  return d;
}

SampleD depth_to_sample(const Eigen::ArrayXd& depth) { return (depth - 0.2) * 2.0 - 1.0; }

Eigen::ArrayXd sample_to_depth(const SampleD& sample) { return (sample + 1.0) / 2.0 + 0.2; }

Dataset generate_dataset(const TaskConfig& config, int count, std::uint64_t base_seed) {
  Dataset d;
  d.config = config;
  d.base_seed = base_seed;
  d.items.reserve(count);
  for (int i = 0; i < count; ++i) {
    d.items.push_back(generate_scene(config, derive_seed(base_seed, std::uint64_t(i))));
  }
  return d;
}

void write_dataset(const std::string& dir, const Dataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int G = data.config.grid;
  const std::size_t plane = std::size_t(G) * G;
  const std::size_t N = data.items.size();

  nlohmann::json index;
  index["format"] = "aligndiff-dataset-v1";
  index["task"] = data.config;
  index["base_seed"] = data.base_seed;
  index["count"] = N;
  nlohmann::json items = nlohmann::json::array();

  TensorBlob images{DType::f32, {std::uint32_t(N), 3, std::uint32_t(G), std::uint32_t(G)}, {}};
  TensorBlob masks{DType::u8, {std::uint32_t(N), std::uint32_t(G), std::uint32_t(G)}, {}};
  images.bytes.resize(N * 3 * plane * 4);
  masks.bytes.resize(N * plane);
  for (std::size_t n = 0; n < N; ++n) {
    const Example& ex = data.items[n];
    items.push_back({{"seed", ex.seed},
                     {"target", ex.target},
                     {"condition", ex.condition},
                     {"objects", ex.scene.objects}});
    const Eigen::ArrayXf img = ex.scene.image.cast<float>();
    std::memcpy(images.bytes.data() + n * 3 * plane * 4, img.data(), 3 * plane * 4);
    std::memcpy(masks.bytes.data() + n * plane, ex.truth.data(), plane);
  }
  index["items"] = std::move(items);
  std::ofstream(fs::path(dir) / "index.json") << index.dump(1);
  write_blob((fs::path(dir) / "images.bin").string(), images);
  write_blob((fs::path(dir) / "masks.bin").string(), masks);
}

Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream f(fs::path(dir) / "index.json");
  if (!f) throw std::runtime_error("no dataset index in " + dir);
  Dataset d;
  try {
    const auto index = nlohmann::json::parse(f);
    if (index.at("format") != "aligndiff-dataset-v1") throw FormatError("unknown dataset format");
    d.config = index.at("task").get<TaskConfig>();
    d.base_seed = index.at("base_seed").get<std::uint64_t>();
    const int G = d.config.grid;
    const std::size_t plane = std::size_t(G) * G;
    const TensorBlob images = read_blob((fs::path(dir) / "images.bin").string());
    const TensorBlob masks = read_blob((fs::path(dir) / "masks.bin").string());
    const std::size_t N = index.at("items").size();
    if (images.dtype != DType::f32 || masks.dtype != DType::u8 ||
        images.element_count() != N * 3 * plane || masks.element_count() != N * plane) {
      throw FormatError("dataset blobs do not match the index");
    }
    for (std::size_t n = 0; n < N; ++n) {
      const auto& item = index["items"][n];
      Example ex;
      ex.seed = item.at("seed").get<std::uint64_t>();
      ex.target = item.at("target").get<int>();
      ex.condition = item.at("condition").get<Condition>();
      ex.scene = ToyScene::from_objects(G, item.at("objects").get<std::vector<SceneObject>>());
      Eigen::ArrayXf img(Eigen::Index(3 * plane));
      std::memcpy(img.data(), images.bytes.data() + n * 3 * plane * 4, 3 * plane * 4);
      if (!img.cast<double>().isApprox(ex.scene.image, 1e-6)) {
        throw FormatError("dataset image " + std::to_string(n) + " does not match its objects");
      }
      ex.truth = Mask(Eigen::Index(plane));
      std::memcpy(ex.truth.data(), masks.bytes.data() + n * plane, plane);
      d.items.push_back(std::move(ex));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset index: ") + e.what());
  }
  return d;
}

}  // namespace aligndiff
