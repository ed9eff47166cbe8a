#include "aligndiff/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "aligndiff/error.hpp"

namespace aligndiff {

bool GuidanceWeights::finite() const {
  return std::isfinite(w_I) && std::isfinite(w_D) && std::isfinite(w_D_neg);
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) {
    throw ConfigError("sampling steps must lie in [1, " + std::to_string(T) + "]");
  }
  std::vector<int> ts(steps);
  for (int k = 0; k < steps; ++k) ts[k] = int((long long)(steps - k) * T / steps);
  return ts;
}

std::vector<int> step_indices_to_timesteps(int T, int steps, const std::vector<int>& indices) {
  const auto grid = ddim_timesteps(T, steps);
  std::vector<int> ts;
  for (int i : indices) {
    if (i < 1 || i > steps) {
      throw ConfigError("sampler step index " + std::to_string(i) + " outside 1.." +
                        std::to_string(steps));
    }
    ts.push_back(grid[i - 1]);
  }
  return ts;
}

namespace {

std::vector<Trajectory> sample_chunk(const TrainedModel& model,
                                     const SampleRequest* requests, int n,
                                     const GuidanceWeights& w, const NoiseSchedule& schedule,
                                     const SamplerOptions& options,
                                     const std::vector<int>& grid,
                                     const std::set<int>& checkpoints) {
  using MatrixF = DenoiserParams<float>::Matrix;
  const ModelConfig& mc = model.params.config;
  const int d = mc.sample_dim();
  const SampleD blank = SampleD::Zero(d);
  const Eigen::VectorXd null_cond = Eigen::VectorXd::Zero(mc.cond_dim);

  std::vector<Trajectory> out(n);
  std::vector<SampleD> x(n);
  std::vector<Eigen::VectorXd> cond(n), neg(n);
  std::vector<int> first_col(n);
  int cols = 0;
  for (int r = 0; r < n; ++r) {
    const SampleRequest& req = requests[r];
    if (!req.scene) throw std::invalid_argument("sample request without a scene");
    if (req.scene->grid != mc.grid) throw ShapeError("scene grid != model grid");
    Rng rng(req.seed);
    x[r] = standard_normal<double>(d, rng);
    cond[r] = req.condition.encode();
    if (req.negative) neg[r] = req.negative->encode();
    first_col[r] = cols;
    cols += req.negative ? 4 : 3;
    out[r].seed = req.seed;
    out[r].weights = w;
    out[r].has_negative = req.negative.has_value();
    out[r].steps = options.steps;
  }

  MatrixF inputs(mc.input_dim(), cols);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const int t = grid[k];
    const int t_prev = k + 1 < grid.size() ? grid[k + 1] : 0;
    for (int r = 0; r < n; ++r) {
      const SampleRequest& req = requests[r];
      int c = first_col[r];
      write_input_column(inputs, c++, mc, x[r], blank, null_cond, t);
      write_input_column(inputs, c++, mc, x[r], req.scene->image, null_cond, t);
      if (req.negative) write_input_column(inputs, c++, mc, x[r], req.scene->image, neg[r], t);
      write_input_column(inputs, c++, mc, x[r], req.scene->image, cond[r], t);
    }
    const MatrixF result = forward_batch(model.params, inputs);
    for (int r = 0; r < n; ++r) {
      const bool has_neg = requests[r].negative.has_value();
      const int c = first_col[r];
      const SampleD e_u = result.col(c).array().cast<double>();
      const SampleD e_i = result.col(c + 1).array().cast<double>();
      const SampleD e_n = has_neg ? SampleD(result.col(c + 2).array().cast<double>()) : e_i;
      const SampleD e_f = result.col(c + (has_neg ? 3 : 2)).array().cast<double>();
      const SampleD e = compose_guidance(e_u, e_i, e_n, e_f, w, has_neg);
      SampleD x0_hat = x0_from_output(x[r], e, model.target_kind, t, schedule);
      if (options.clip_x0) x0_hat = x0_hat.cwiseMax(-1.0).cwiseMin(1.0);
      if (checkpoints.count(t)) {
        TrajectoryCheckpoint cp;
        cp.t = t;
        cp.x_t = x[r];
        cp.x0_hat = x0_hat;
        cp.mask = extract_mask(cp.x0_hat, options.extraction);
        cp.metric = requests[r].truth ? iou(cp.mask, *requests[r].truth) : std::nan("");
        out[r].checkpoints.push_back(std::move(cp));
      }
      x[r] = options.clip_x0 ? ddim_step(x[r], x0_hat, TargetKind::x0, t, t_prev, schedule)
                             : ddim_step(x[r], e, model.target_kind, t, t_prev, schedule);
    }
  }
  for (int r = 0; r < n; ++r) {
    out[r].final = std::move(x[r]);
    out[r].final_mask = extract_mask(out[r].final, options.extraction);
    out[r].final_metric =
        requests[r].truth ? iou(out[r].final_mask, *requests[r].truth) : std::nan("");
  }
  return out;
}

}  // namespace

std::vector<Trajectory> sample_trajectories(const TrainedModel& model,
                                            const std::vector<SampleRequest>& requests,
                                            const GuidanceWeights& w,
                                            const NoiseSchedule& schedule,
                                            const SamplerOptions& options) {
  if (!w.finite()) throw ConfigError("guidance weights must be finite");
  const auto grid = ddim_timesteps(schedule.steps(), options.steps);
  std::set<int> checkpoints;
  for (int t : options.checkpoint_ts) {
    if (!std::binary_search(grid.begin(), grid.end(), t, std::greater<int>())) {
      throw ConfigError("checkpoint t=" + std::to_string(t) + " is not on the " +
                        std::to_string(options.steps) + "-step sampling grid");
    }
    checkpoints.insert(t);
  }
  std::vector<Trajectory> all;
  all.reserve(requests.size());
  const int chunk = std::max(1, options.max_batch / 4);
  for (std::size_t begin = 0; begin < requests.size(); begin += chunk) {
    const int n = int(std::min<std::size_t>(chunk, requests.size() - begin));
    auto part = sample_chunk(model, requests.data() + begin, n, w, schedule, options, grid,
                             checkpoints);
    for (auto& tr : part) all.push_back(std::move(tr));
  }
  return all;
}

Trajectory sample_trajectory(const TrainedModel& model, const ToyScene& scene,
                             const Condition& cond, const std::optional<Condition>& neg,
                             const GuidanceWeights& w, const NoiseSchedule& schedule,
                             const SamplerOptions& options, Rng& rng, const Mask* truth) {
  SampleRequest req{&scene, cond, neg, truth, rng()};
  return std::move(sample_trajectories(model, {req}, w, schedule, options).front());
}

namespace {

// A distractor is compatible with a spatial qualifier when it sits on the
// qualifier's half of the grid (e.g. left of center for "left").
bool qualifier_compatible(const SceneObject& o, Qualifier q, int grid) {
  const double mid = (grid - 1) / 2.0;
  switch (q) {
    case Qualifier::left:
      return o.cx < mid;
    case Qualifier::right:
      return o.cx > mid;
    case Qualifier::top:
      return o.cy < mid;
    case Qualifier::bottom:
      return o.cy > mid;
    case Qualifier::any:
      return false;
  }
  return false;
}

// Name an object so that the condition picks it out of the scene: full
// attributes first, then a position qualifier, then single attributes.
std::optional<Condition> describe(const ToyScene& scene, int index, int margin) {
  const SceneObject& o = scene.objects[index];
  for (int attrs : {3, 2, 1}) {
    for (Qualifier q : {Qualifier::any, Qualifier::left, Qualifier::right, Qualifier::top,
                        Qualifier::bottom}) {
      Condition c;
      if (attrs & 1) c.shape = o.shape;
      if (attrs & 2) c.color = o.color;
      c.qualifier = q;
      const auto hit = resolve(scene, c, margin);
      if (hit && *hit == index) return c;
    }
  }
  return std::nullopt;
}

}  // namespace

std::vector<Condition> RuleBasedAdvisor::propose(const ToyScene& scene, const Condition& cond,
                                                 int k) const {
  if (k < 1) throw std::invalid_argument("advisor needs k >= 1");
  const auto target = resolve(scene, cond, margin_);
  if (!target) return {};
  const SceneObject& ref = scene.objects[*target];

  struct Ranked {
    int index;
    int score;
    long long area;
  };
  std::vector<Ranked> ranked;
  for (int i = 0; i < int(scene.objects.size()); ++i) {
    if (i == *target) continue;
    const SceneObject& o = scene.objects[i];
    int score = 0;
    if (o.color == ref.color) score += 2;
    if (o.shape == ref.shape) score += 2;
    if (qualifier_compatible(o, cond.qualifier, scene.grid)) score += 1;
    ranked.push_back({i, score, (long long)(scene.masks[i] != 0).count()});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.area != b.area) return a.area > b.area;
    return a.index < b.index;
  });

  std::vector<Condition> out;
  for (const Ranked& r : ranked) {
    if (int(out.size()) == k) break;
    std::optional<Condition> c = describe(scene, r.index, margin_);
    if (!c) continue;
    c->negated = true;
    if (std::find(out.begin(), out.end(), *c) == out.end()) out.push_back(*c);
  }
  return out;
}

std::vector<Condition> propose_negatives(const ToyScene& scene, const Condition& cond, int k) {
  return RuleBasedAdvisor().propose(scene, cond, k);
}

Mask majority_vote(const std::vector<Mask>& masks) {
  if (masks.empty()) throw std::invalid_argument("majority_vote needs at least one mask");
  Eigen::ArrayXi votes = Eigen::ArrayXi::Zero(masks.front().size());
  for (const Mask& m : masks) {
    if (m.size() != votes.size()) throw ShapeError("majority_vote masks differ in size");
    votes += (m != 0).cast<int>();
  }
  return (2 * votes > int(masks.size())).cast<std::uint8_t>();
}

nlohmann::json condition_to_json(const Condition& c) {
  if (c.null) return {{"null", true}};
  nlohmann::json j;
  j["shape"] = c.shape ? nlohmann::json(to_string(*c.shape)) : nlohmann::json(nullptr);
  j["color"] = c.color ? nlohmann::json(to_string(*c.color)) : nlohmann::json(nullptr);
  j["qualifier"] = to_string(c.qualifier);
  j["negated"] = c.negated;
  j["text"] = c.describe();
  return j;
}

Condition condition_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("condition must be a JSON object");
  Condition c;
  if (j.value("null", false)) return Condition::empty();
  for (const auto& [key, value] : j.items()) {
    if (key != "shape" && key != "color" && key != "qualifier" && key != "negated" &&
        key != "text" && key != "null") {
      throw ConfigError("unknown condition key '" + key + "'");
    }
  }
  if (j.contains("shape") && !j["shape"].is_null()) c.shape = shape_from_string(j["shape"]);
  if (j.contains("color") && !j["color"].is_null()) c.color = color_from_string(j["color"]);
  if (j.contains("qualifier")) c.qualifier = qualifier_from_string(j["qualifier"]);
  c.negated = j.value("negated", false);
  if (!c.shape && !c.color && c.qualifier == Qualifier::any) {
    throw ConfigError("condition names no shape, color or qualifier");
  }
  return c;
}

nlohmann::json WorkflowProvenance::to_json() const {
  nlohmann::json negs = nlohmann::json::array();
  for (const auto& n : negatives) negs.push_back(condition_to_json(n));
  nlohmann::json ious = nlohmann::json::array();
  for (double v : branch_ious) ious.push_back(std::isfinite(v) ? nlohmann::json(v) : nullptr);
  return {{"condition", condition_to_json(condition)},
          {"negatives", negs},
          {"seeds", seeds},
          {"branch_ious", ious},
          {"weights", {{"w_I", weights.w_I}, {"w_D", weights.w_D}, {"w_D_neg", weights.w_D_neg}}},
          {"steps", steps},
          {"advisor", advisor}};
}

std::vector<WorkflowResult> run_correction_workflows(const TrainedModel& model,
                                                     const std::vector<WorkflowItem>& items,
                                                     int k, const GuidanceWeights& w,
                                                     const NoiseSchedule& schedule,
                                                     const SamplerOptions& options,
                                                     const Advisor* advisor) {
  if (k < 1) throw std::invalid_argument("workflow needs k >= 1");
  const RuleBasedAdvisor fallback;
  const Advisor& adv = advisor ? *advisor : fallback;

  std::vector<WorkflowResult> results(items.size());
  std::vector<SampleRequest> requests;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const WorkflowItem& item = items[i];
    WorkflowProvenance& prov = results[i].provenance;
    prov.condition = item.condition;
    prov.negatives = adv.propose(*item.scene, item.condition, k);
    prov.weights = w;
    prov.steps = options.steps;
    prov.advisor = adv.name();
    const std::size_t branches = std::max<std::size_t>(1, prov.negatives.size());
    for (std::size_t b = 0; b < branches; ++b) {
      SampleRequest req;
      req.scene = item.scene;
      req.condition = item.condition;
      if (!prov.negatives.empty()) req.negative = prov.negatives[b];
      req.truth = item.truth;
      req.seed = derive_seed(item.base_seed, b);
      prov.seeds.push_back(req.seed);
      requests.push_back(req);
      owner.push_back(i);
    }
  }
  auto trajectories = sample_trajectories(model, requests, w, schedule, options);
  for (std::size_t r = 0; r < trajectories.size(); ++r) {
    WorkflowResult& res = results[owner[r]];
    res.provenance.branch_ious.push_back(trajectories[r].final_metric);
    res.branches.push_back(std::move(trajectories[r]));
  }
  for (auto& res : results) {
    std::vector<Mask> masks;
    for (const auto& tr : res.branches) masks.push_back(tr.final_mask);
    res.mask = majority_vote(masks);
  }
  return results;
}

WorkflowResult run_correction_workflow(const TrainedModel& model, const ToyScene& scene,
                                       const Condition& cond, int k, const GuidanceWeights& w,
                                       const NoiseSchedule& schedule,
                                       const SamplerOptions& options, std::uint64_t base_seed,
                                       const Mask* truth, const Advisor* advisor) {
  WorkflowItem item{&scene, cond, truth, base_seed};
  return std::move(
      run_correction_workflows(model, {item}, k, w, schedule, options, advisor).front());
}

}  // namespace aligndiff
