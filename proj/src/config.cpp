#include "aligndiff/config.hpp"

#include <fstream>
#include <sstream>

#include "aligndiff/error.hpp"
#include "json_io.hpp"

namespace aligndiff {

using nlohmann::json;

namespace {

template <typename T, typename F>
json names(const std::vector<T>& values, F name) {
  json a = json::array();
  for (const T& v : values) a.push_back(name(v));
  return a;
}

template <typename T, typename F>
std::vector<T> parse_names(const json& a, F parse) {
  std::vector<T> out;
  for (const auto& v : a) out.push_back(parse(v.get<std::string>()));
  return out;
}

}  // namespace

void to_json(json& j, const TaskConfig& c) {
  j = {{"grid", c.grid},
       {"min_objects", c.min_objects},
       {"max_objects", c.max_objects},
       {"min_size", c.min_size},
       {"max_size", c.max_size},
       {"shapes", names(c.shapes, [](ShapeClass s) { return to_string(s); })},
       {"colors", names(c.colors, [](ColorClass s) { return to_string(s); })},
       {"qualifiers", names(c.qualifiers, [](Qualifier s) { return to_string(s); })},
       {"min_visible_fraction", c.min_visible_fraction},
       {"qualifier_margin", c.qualifier_margin},
       {"min_sharing_distractors", c.min_sharing_distractors},
       {"retry_budget", c.retry_budget}};
}

void from_json(const json& j, TaskConfig& c) {
  c.grid = j.at("grid");
  c.min_objects = j.at("min_objects");
  c.max_objects = j.at("max_objects");
  c.min_size = j.at("min_size");
  c.max_size = j.at("max_size");
  c.shapes = parse_names<ShapeClass>(j.at("shapes"), shape_from_string);
  c.colors = parse_names<ColorClass>(j.at("colors"), color_from_string);
  c.qualifiers = parse_names<Qualifier>(j.at("qualifiers"), qualifier_from_string);
  c.min_visible_fraction = j.at("min_visible_fraction");
  c.qualifier_margin = j.at("qualifier_margin");
  c.min_sharing_distractors = j.at("min_sharing_distractors");
  c.retry_budget = j.at("retry_budget");
}

void to_json(json& j, const SceneObject& o) {
  j = {{"shape", to_string(o.shape)}, {"color", to_string(o.color)}, {"cx", o.cx},
       {"cy", o.cy},                  {"size", o.size},                {"z_order", o.z_order}};
}

void from_json(const json& j, SceneObject& o) {
  o.shape = shape_from_string(j.at("shape"));
  o.color = color_from_string(j.at("color"));
  o.cx = j.at("cx");
  o.cy = j.at("cy");
  o.size = j.at("size");
  o.z_order = j.at("z_order");
}

void to_json(json& j, const Condition& c) { j = condition_to_json(c); }
void from_json(const json& j, Condition& c) { c = condition_from_json(j); }

void to_json(json& j, const AugmentationSpec& s) {
  j = {{"enabled", s.enabled},
       {"intensity_multiplier", s.intensity_multiplier},
       {"schedule", to_string(s.schedule)},
       {"color", s.color},
       {"location", s.location},
       {"shape", s.shape},
       {"blur", s.blur},
       {"color_max", s.color_max},
       {"rotate_max_deg", s.rotate_max_deg},
       {"translate_max_frac", s.translate_max_frac},
       {"scale_range", {s.scale_range.first, s.scale_range.second}},
       {"erase_frac_range", {s.erase_frac_range.first, s.erase_frac_range.second}},
       {"blur_kernel", s.blur_kernel},
       {"blur_sigma_max", s.blur_sigma_max}};
}

void from_json(const json& j, AugmentationSpec& s) {
  s.enabled = j.at("enabled");
  s.intensity_multiplier = j.at("intensity_multiplier");
  s.schedule = intensity_schedule_from_string(j.at("schedule"));
  s.color = j.at("color");
  s.location = j.at("location");
  s.shape = j.at("shape");
  s.blur = j.at("blur");
  s.color_max = j.at("color_max");
  s.rotate_max_deg = j.at("rotate_max_deg");
  s.translate_max_frac = j.at("translate_max_frac");
  const auto& sr = j.at("scale_range");
  const auto& er = j.at("erase_frac_range");
  if (sr.size() != 2 || er.size() != 2) throw ConfigError("ranges need two entries");
  s.scale_range = {sr[0], sr[1]};
  s.erase_frac_range = {er[0], er[1]};
  s.blur_kernel = j.at("blur_kernel");
  s.blur_sigma_max = j.at("blur_sigma_max");
}

TargetKind ExperimentConfig::target_kind() const {
  if (train.target_kind) return *train.target_kind;
  return TargetKind::x0;
}

void ExperimentConfig::validate() const {
  if (schedule.T < 1) throw ConfigError("schedule.T must be positive");
  schedule.build();
  task.generator.validate();
  if (task.train_size < 1 || task.test_size < 1 || task.trace_size < 1) throw ConfigError("dataset sizes must be positive");
  model.validate();
  if (model.grid != task.generator.grid) throw ConfigError("model.grid must equal task.grid");
  if (model.cond_dim != kConditionDim) {
    throw ConfigError("model.cond_dim must be " + std::to_string(kConditionDim));
  }
  if (train.groups < 1 || train.groups > schedule.T) throw ConfigError("train.groups out of range");
  if (train.floor < 0.0 || train.floor * train.groups > 1.0) {
    throw ConfigError("train.floor must satisfy 0 <= floor * groups <= 1");
  }
  if (train.profile_source == ProfileSource::statistics &&
      int(train.profile_weights.size()) != train.groups) {
    throw ConfigError("a statistics profile needs train.profile_weights with one entry per group");
  }
  if (train.profile_source != ProfileSource::statistics && !train.profile_weights.empty()) {
    throw ConfigError("train.profile_weights only applies to the statistics source");
  }
  augment.validate();
  if (eval.steps < 1 || eval.steps > schedule.T) throw ConfigError("eval.steps out of range");
  for (int s : eval.checkpoint_steps) {
    if (s < 1 || s > eval.steps) throw ConfigError("eval.checkpoint_steps entry out of range");
  }
  for (int s : eval.trace_steps) {
    if (s < 1 || s > schedule.T) throw ConfigError("eval.trace_steps entry out of range");
  }
  if (eval.delta <= 0.0) throw ConfigError("eval.delta must be positive");
  if (eval.max_batch < 4) throw ConfigError("eval.max_batch must be at least 4");
  if (!guidance.finite()) throw ConfigError("guidance weights must be finite");
  if (workflow.k < 1) throw ConfigError("workflow.k must be >= 1");
  if (workflow.advisor != "rule-based") {
    throw ConfigError("unknown advisor '" + workflow.advisor + "'");
  }
  build_train_config(*this, schedule.build()).validate();
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return config_to_json(*this) == config_to_json(o);
}

json config_to_json(const ExperimentConfig& c) {
  json task = c.task.generator;
  task["train_size"] = c.task.train_size;
  task["test_size"] = c.task.test_size;
  task["trace_size"] = c.task.trace_size;
  task["seed"] = c.task.seed;
  return {
      {"schedule", {{"T", c.schedule.T}, {"beta_min", c.schedule.beta_min}, {"beta_max", c.schedule.beta_max}}},
      {"task", task},
      {"model",
       {{"grid", c.model.grid},
        {"cond_dim", c.model.cond_dim},
        {"time_dim", c.model.time_dim},
        {"hidden", c.model.hidden}}},
      {"train",
       {{"target_kind", c.train.target_kind ? to_string(*c.train.target_kind) : "auto"},
        {"strategy", to_string(c.train.strategy)},
        {"profile_source", to_string(c.train.profile_source)},
        {"profile_weights", c.train.profile_weights},
        {"groups", c.train.groups},
        {"floor", c.train.floor},
        {"cond_drop_prob", c.train.cond_drop_prob},
        {"image_drop_prob", c.train.image_drop_prob},
        {"learning_rate", c.train.learning_rate},
        {"lr_schedule", to_string(c.train.lr_schedule)},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"weight_decay", c.train.weight_decay},
        {"seed", c.train.seed},
        {"eval_every", c.train.eval_every}}},
      {"augment", c.augment},
      {"eval",
       {{"steps", c.eval.steps},
        {"checkpoint_steps", c.eval.checkpoint_steps},
        {"trace_steps", c.eval.trace_steps},
        {"delta", c.eval.delta},
        {"clip_x0", c.eval.clip_x0},
        {"seed", c.eval.seed},
        {"max_batch", c.eval.max_batch}}},
      {"guidance", {{"w_I", c.guidance.w_I}, {"w_D", c.guidance.w_D}, {"w_D_neg", c.guidance.w_D_neg}}},
      {"workflow", {{"k", c.workflow.k}, {"advisor", c.workflow.advisor}}}};
}

namespace {

// Overlay `patch` onto `base`, refusing keys the base does not have.
void merge_known(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("'" + path + "' must be a JSON object");
  for (const auto& [key, value] : patch.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    if (base[key].is_object()) {
      merge_known(base[key], value, here);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  json full = config_to_json(ExperimentConfig{});
  merge_known(full, j, "");
  ExperimentConfig c;
  try {
    const json& s = full["schedule"];
    c.schedule.T = s.at("T");
    c.schedule.beta_min = s.at("beta_min");
    c.schedule.beta_max = s.at("beta_max");

    json task = full["task"];
    c.task.train_size = task.at("train_size");
    c.task.test_size = task.at("test_size");
    c.task.trace_size = task.at("trace_size");
    c.task.seed = task.at("seed");
    c.task.generator = task.get<TaskConfig>();

    const json& m = full["model"];
    c.model.grid = m.at("grid");
    c.model.cond_dim = m.at("cond_dim");
    c.model.time_dim = m.at("time_dim");
    c.model.hidden = m.at("hidden");

    const json& t = full["train"];
    const std::string kind = t.at("target_kind");
    if (kind != "auto") c.train.target_kind = target_kind_from_string(kind);
    c.train.strategy = strategy_kind_from_string(t.at("strategy"));
    c.train.profile_source = profile_source_from_string(t.at("profile_source"));
    c.train.profile_weights = t.at("profile_weights").get<std::vector<double>>();
    c.train.groups = t.at("groups");
    c.train.floor = t.at("floor");
    c.train.cond_drop_prob = t.at("cond_drop_prob");
    c.train.image_drop_prob = t.at("image_drop_prob");
    c.train.learning_rate = t.at("learning_rate");
    c.train.lr_schedule = lr_schedule_from_string(t.at("lr_schedule"));
    c.train.batch_size = t.at("batch_size");
    c.train.epochs = t.at("epochs");
    c.train.weight_decay = t.at("weight_decay");
    c.train.seed = t.at("seed");
    c.train.eval_every = t.at("eval_every");

    c.augment = full["augment"].get<AugmentationSpec>();

    const json& e = full["eval"];
    c.eval.steps = e.at("steps");
    c.eval.checkpoint_steps = e.at("checkpoint_steps").get<std::vector<int>>();
    c.eval.trace_steps = e.at("trace_steps").get<std::vector<int>>();
    c.eval.delta = e.at("delta");
    c.eval.clip_x0 = e.at("clip_x0");
    c.eval.seed = e.at("seed");
    c.eval.max_batch = e.at("max_batch");

    const json& g = full["guidance"];
    c.guidance.w_I = g.at("w_I");
    c.guidance.w_D = g.at("w_D");
    c.guidance.w_D_neg = g.at("w_D_neg");

    c.workflow.k = full["workflow"].at("k");
    c.workflow.advisor = full["workflow"].at("advisor");
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("bad config value: ") + ex.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  try {
    return config_from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void save_config(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << config_to_json(cfg).dump(2) << '\n';
}

ExperimentConfig apply_overrides(const ExperimentConfig& cfg,
                                 const std::vector<std::string>& assignments) {
  json j = config_to_json(cfg);
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + a + "' is not of the form key.path=value");
    }
    const std::string path = a.substr(0, eq);
    const std::string text = a.substr(eq + 1);
    json* node = &j;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!node->is_object() || !node->contains(part)) {
        throw ConfigError("unknown config key '" + path + "'");
      }
      node = &(*node)[part];
    }
    if (node->is_object()) throw ConfigError("'" + path + "' is a section, not a key");
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = value;
  }
  return config_from_json(j);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) {
  return fnv1a_hex(config_to_json(cfg).dump());
}

TimestepStrategy build_strategy(const ExperimentConfig& cfg, const NoiseSchedule& schedule) {
  const int T = schedule.steps();
  const int B = cfg.train.groups;
  ContributionProfile profile;
  switch (cfg.train.profile_source) {
    case ProfileSource::uniform:
      profile = uniform_profile(T, B);
      break;
    case ProfileSource::schedule:
      profile = schedule_profile(schedule, B);
      break;
    case ProfileSource::statistics:
      profile.source = ProfileSource::statistics;
      profile.group_bounds = even_group_bounds(T, B);
      profile.weights = Eigen::Map<const Eigen::VectorXd>(cfg.train.profile_weights.data(),
                                                         Eigen::Index(B));
      break;
  }
  profile.validate(1e-6);
  switch (cfg.train.strategy) {
    case StrategyKind::uniform:
      return TimestepStrategy::uniform(T, B);
    case StrategyKind::loss_scaling:
      return TimestepStrategy::loss_scaling(profile);
    case StrategyKind::prob_scaling:
      return TimestepStrategy::prob_scaling(profile);
  }
  return TimestepStrategy::uniform(T, B);
}

TrainConfig build_train_config(const ExperimentConfig& cfg, const NoiseSchedule& schedule) {
  TrainConfig t;
  t.target_kind = cfg.target_kind();
  t.strategy = build_strategy(cfg, schedule);
  t.aug = cfg.augment;
  t.cond_drop_prob = cfg.train.cond_drop_prob;
  t.image_drop_prob = cfg.train.image_drop_prob;
  t.learning_rate = cfg.train.learning_rate;
  t.lr_schedule = cfg.train.lr_schedule;
  t.batch_size = cfg.train.batch_size;
  t.epochs = cfg.train.epochs;
  t.weight_decay = cfg.train.weight_decay;
  t.seed = cfg.train.seed;
  t.eval_every = cfg.train.eval_every;
  return t;
}

SamplerOptions build_sampler_options(const ExperimentConfig& cfg, const NoiseSchedule& schedule) {
  SamplerOptions o;
  o.steps = cfg.eval.steps;
  o.checkpoint_ts = step_indices_to_timesteps(schedule.steps(), cfg.eval.steps,
                                              cfg.eval.checkpoint_steps);
  o.extraction.delta = cfg.eval.delta;
  o.clip_x0 = cfg.eval.clip_x0;
  o.max_batch = cfg.eval.max_batch;
  return o;
}

namespace {

void diff_into(const json& a, const json& b, const std::string& path,
               std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    for (const auto& [key, value] : a.items()) {
      diff_into(value, b.contains(key) ? b[key] : json(), path.empty() ? key : path + "." + key,
                out);
    }
    return;
  }
  if (a != b) out.push_back(path);
}

}  // namespace

std::vector<std::string> config_diff(const ExperimentConfig& a, const ExperimentConfig& b) {
  std::vector<std::string> out;
  diff_into(config_to_json(a), config_to_json(b), "", out);
  return out;
}

}  // namespace aligndiff
