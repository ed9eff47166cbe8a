#include "aligndiff/service.hpp"

#include <filesystem>
#include <iostream>
#include <regex>

#include <httplib.h>

#include "aligndiff/error.hpp"
#include "aligndiff/experiment.hpp"
#include "json_io.hpp"

namespace aligndiff {

using nlohmann::json;
namespace fs = std::filesystem;

std::string image_b64(const SampleD& image, int grid) {
  return base64_encode(encode_png(image, grid, grid));
}

json rle_to_json(const RunLengthMask& rle) {
  return {{"height", rle.height}, {"width", rle.width}, {"counts", rle.counts}};
}

RunLengthMask rle_from_json(const json& j) {
  RunLengthMask r;
  r.height = j.at("height");
  r.width = j.at("width");
  r.counts = j.at("counts").get<std::vector<int>>();
  return r;
}

json scene_to_json(const ToyScene& scene) {
  return {{"grid", scene.grid},
          {"image_b64", image_b64(scene.image, scene.grid)},
          {"objects", scene.objects}};
}

namespace {

json weights_to_json(const GuidanceWeights& w) {
  return {{"w_I", w.w_I}, {"w_D", w.w_D}, {"w_D_neg", w.w_D_neg}};
}

GuidanceWeights weights_from_json(const json& j, GuidanceWeights w) {
  if (j.is_null()) return w;
  if (!j.is_object()) throw ApiError(422, "invalid_argument", "weights must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) throw ApiError(422, "invalid_argument", "weight " + key + " must be a number");
    if (key == "w_I") {
      w.w_I = value;
    } else if (key == "w_D") {
      w.w_D = value;
    } else if (key == "w_D_neg") {
      w.w_D_neg = value;
    } else {
      throw ApiError(422, "invalid_argument", "unknown weight '" + key + "'");
    }
  }
  if (!w.finite()) throw ApiError(422, "invalid_argument", "weights must be finite");
  return w;
}

Condition parse_condition(const json& j) {
  try {
    return condition_from_json(j);
  } catch (const ConfigError& e) {
    throw ApiError(422, "invalid_condition", e.what());
  }
}

int int_field(const json& body, const char* key, int fallback, int lo, int hi) {
  if (!body.contains(key) || body[key].is_null()) return fallback;
  if (!body[key].is_number_integer()) {
    throw ApiError(422, "invalid_argument", std::string(key) + " must be an integer");
  }
  const int v = body[key];
  if (v < lo || v > hi) {
    throw ApiError(422, "invalid_argument", std::string(key) + " must lie in [" +
                                                std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return v;
}

json error_body(const std::string& code, const std::string& message) {
  return {{"code", code}, {"message", message}};
}

}  // namespace

Service::Service() = default;
Service::~Service() { stop(); }

void Service::add_checkpoint(RegisteredCheckpoint checkpoint) {
  std::lock_guard lock(registry_mutex_);
  const std::string id = checkpoint.id;
  checkpoints_[id] = std::make_shared<const RegisteredCheckpoint>(std::move(checkpoint));
}

int Service::add_runs_dir(const std::string& runs_dir) {
  int added = 0;
  if (!fs::is_directory(runs_dir)) return 0;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(runs_dir)) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    if (!fs::exists(dir / "checkpoint.bin") || !fs::exists(dir / "config.json")) continue;
    try {
      LoadedRun run = load_run(dir.string());
      add_checkpoint({dir.filename().string(), std::move(run.config), std::move(run.model)});
      ++added;
    } catch (const std::exception& e) {
      std::cerr << "skipping " << dir << ": " << e.what() << '\n';
    }
  }
  return added;
}

std::size_t Service::checkpoint_count() const {
  std::lock_guard lock(registry_mutex_);
  return checkpoints_.size();
}

const RegisteredCheckpoint& Service::checkpoint(const std::string& id) const {
  std::lock_guard lock(registry_mutex_);
  const auto it = checkpoints_.find(id);
  if (it == checkpoints_.end()) throw ApiError(404, "unknown_checkpoint", "no checkpoint '" + id + "'");
  return *it->second;
}

std::shared_ptr<Service::Session> Service::session(const std::string& id) {
  std::lock_guard lock(registry_mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ApiError(404, "unknown_session", "no session '" + id + "'");
  return it->second;
}

json Service::list_checkpoints() const {
  std::lock_guard lock(registry_mutex_);
  json out = json::array();
  for (const auto& [id, cp] : checkpoints_) {
    out.push_back({{"id", id},
                   {"config_hash", config_hash(cp->config)},
                   {"target_kind", to_string(cp->model.target_kind)},
                   {"grid", cp->config.model.grid},
                   {"seed", cp->config.train.seed},
                   {"strategy", to_string(cp->config.train.strategy)},
                   {"augment", cp->config.augment.enabled}});
  }
  return {{"checkpoints", out}};
}

json Service::list_scenes(const std::map<std::string, std::string>& query) const {
  auto number = [&](const char* key, long long fallback) -> long long {
    const auto it = query.find(key);
    if (it == query.end()) return fallback;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      throw ApiError(400, "bad_request", std::string("query parameter ") + key + " must be an integer");
    }
  };
  const long long seed = number("seed", 0);
  const long long count = number("count", 1);
  if (seed < 0 || count < 1 || count > 64) {
    throw ApiError(422, "invalid_argument", "need seed >= 0 and 1 <= count <= 64");
  }
  TaskConfig task;
  const auto cp = query.find("checkpoint");
  if (cp != query.end()) {
    task = checkpoint(cp->second).config.task.generator;
  } else {
    std::lock_guard lock(registry_mutex_);
    if (!checkpoints_.empty()) task = checkpoints_.begin()->second->config.task.generator;
  }
  json scenes = json::array();
  for (long long i = 0; i < count; ++i) {
    const std::uint64_t s = std::uint64_t(seed + i);
    const Example ex = generate_scene(task, s);
    json j = scene_to_json(ex.scene);
    j["seed"] = s;
    j["condition"] = condition_to_json(ex.condition);
    j["target"] = ex.target;
    j["mask_rle"] = rle_to_json(rle_encode(ex.truth, task.grid, task.grid));
    scenes.push_back(std::move(j));
  }
  return {{"scenes", scenes}};
}

json Service::create_session(const json& body) {
  if (!body.is_object()) throw ApiError(400, "bad_request", "body must be a JSON object");
  if (!body.contains("checkpoint_id") || !body["checkpoint_id"].is_string()) {
    throw ApiError(422, "invalid_argument", "checkpoint_id (string) is required");
  }
  if (!body.contains("scene_seed") || !body["scene_seed"].is_number_unsigned()) {
    throw ApiError(422, "invalid_argument", "scene_seed (non-negative integer) is required");
  }
  const RegisteredCheckpoint& cp = checkpoint(body["checkpoint_id"]);
  auto s = std::make_shared<Session>();
  s->checkpoint_id = cp.id;
  s->scene_seed = body["scene_seed"];
  s->seed = body.contains("seed") ? body["seed"].get<std::uint64_t>() : derive_seed(s->scene_seed, 0);
  s->example = generate_scene(cp.config.task.generator, s->scene_seed);
  if (body.contains("condition") && !body["condition"].is_null()) {
    const Condition c = parse_condition(body["condition"]);
    const auto target = resolve(s->example.scene, c, cp.config.task.generator.qualifier_margin);
    if (!target) {
      throw ApiError(422, "ambiguous_condition",
                     "'" + c.describe() + "' does not single out one object in this scene");
    }
    s->example.condition = c;
    s->example.target = *target;
    s->example.truth = s->example.scene.masks[*target];
  }
  {
    std::lock_guard lock(registry_mutex_);
    s->id = "s" + std::to_string(next_session_++);
    sessions_[s->id] = s;
  }
  const int G = s->example.scene.grid;
  json scene = scene_to_json(s->example.scene);
  scene["seed"] = s->scene_seed;
  return {{"session_id", s->id},
          {"checkpoint_id", s->checkpoint_id},
          {"seed", s->seed},
          {"scene", scene},
          {"condition", condition_to_json(s->example.condition)},
          {"target", s->example.target},
          {"mask_rle", rle_to_json(rle_encode(s->example.truth, G, G))}};
}

json Service::run(Session& s, const json& body) {
  const RegisteredCheckpoint& cp = checkpoint(s.checkpoint_id);
  const NoiseSchedule schedule = cp.config.schedule.build();
  SamplerOptions options = build_sampler_options(cp.config, schedule);
  options.steps = int_field(body, "steps", cp.config.eval.steps, 1, schedule.steps());

  const auto grid = ddim_timesteps(schedule.steps(), options.steps);
  options.checkpoint_ts.clear();
  if (body.contains("checkpoints") && !body["checkpoints"].is_null()) {
    if (!body["checkpoints"].is_array()) {
      throw ApiError(422, "invalid_argument", "checkpoints must be a list of timesteps");
    }
    for (const auto& t : body["checkpoints"]) {
      if (!t.is_number_integer() ||
          std::find(grid.begin(), grid.end(), t.get<int>()) == grid.end()) {
        throw ApiError(422, "invalid_checkpoint",
                       "checkpoint " + t.dump() + " is not on the " +
                           std::to_string(options.steps) + "-step grid");
      }
      options.checkpoint_ts.push_back(t);
    }
  } else {
    std::vector<int> idx;
    for (int k : cp.config.eval.checkpoint_steps) {
      const int scaled = std::max(1, int(std::lround(double(k) * options.steps / cp.config.eval.steps)));
      if (idx.empty() || idx.back() != scaled) idx.push_back(scaled);
    }
    options.checkpoint_ts = step_indices_to_timesteps(schedule.steps(), options.steps, idx);
  }

  const GuidanceWeights w = weights_from_json(body.value("weights", json()), cp.config.guidance);
  std::optional<Condition> negative;
  if (body.contains("negative") && !body["negative"].is_null()) {
    negative = parse_condition(body["negative"]);
    negative->negated = true;
  }
  const std::uint64_t seed = body.contains("seed") ? body["seed"].get<std::uint64_t>() : s.seed;

  SampleRequest req{&s.example.scene, s.example.condition, negative, &s.example.truth, seed};
  const Trajectory tr = std::move(sample_trajectories(cp.model, {req}, w, schedule, options).front());

  const int G = s.example.scene.grid;
  std::vector<int> sorted = options.checkpoint_ts;
  std::sort(sorted.begin(), sorted.end(), std::greater<int>());
  json frames = json::array();
  for (int t : sorted) {
    const auto it = std::find_if(tr.checkpoints.begin(), tr.checkpoints.end(),
                                 [t](const auto& c) { return c.t == t; });
    frames.push_back({{"t", t},
                      {"image_b64", image_b64(it->x0_hat, G)},
                      {"mask_rle", rle_to_json(rle_encode(it->mask, G, G))},
                      {"iou", it->metric}});
  }
  json provenance{{"checkpoint_id", cp.id},
                  {"config_hash", config_hash(cp.config)},
                  {"condition", condition_to_json(s.example.condition)},
                  {"negative", negative ? condition_to_json(*negative) : json(nullptr)},
                  {"weights", weights_to_json(w)},
                  {"steps", options.steps},
                  {"seed", seed}};
  return {{"frames", frames},
          {"final_iou", tr.final_metric},
          {"final_mask_rle", rle_to_json(rle_encode(tr.final_mask, G, G))},
          {"final_image_b64", image_b64(tr.final, G)},
          {"provenance", provenance}};
}

json Service::advise(Session& s, const json& body) {
  const RegisteredCheckpoint& cp = checkpoint(s.checkpoint_id);
  const int k = int_field(body, "k", cp.config.workflow.k, 1, 16);
  json negs = json::array();
  for (const auto& c : RuleBasedAdvisor(cp.config.task.generator.qualifier_margin)
                           .propose(s.example.scene, s.example.condition, k)) {
    negs.push_back(condition_to_json(c));
  }
  return {{"negatives", negs}};
}

json Service::workflow(Session& s, const json& body) {
  const RegisteredCheckpoint& cp = checkpoint(s.checkpoint_id);
  const NoiseSchedule schedule = cp.config.schedule.build();
  SamplerOptions options = build_sampler_options(cp.config, schedule);
  options.steps = int_field(body, "steps", cp.config.eval.steps, 1, schedule.steps());
  options.checkpoint_ts.clear();
  const int k = int_field(body, "k", cp.config.workflow.k, 1, 16);
  const GuidanceWeights w = weights_from_json(body.value("weights", json()), cp.config.guidance);
  const RuleBasedAdvisor advisor(cp.config.task.generator.qualifier_margin);
  const WorkflowResult res = run_correction_workflow(cp.model, s.example.scene, s.example.condition,
                                                     k, w, schedule, options, s.seed,
                                                     &s.example.truth, &advisor);
  const int G = s.example.scene.grid;
  json branches = json::array();
  for (std::size_t b = 0; b < res.branches.size(); ++b) {
    branches.push_back({{"negative", b < res.provenance.negatives.size()
                                         ? condition_to_json(res.provenance.negatives[b])
                                         : json(nullptr)},
                        {"mask_rle", rle_to_json(rle_encode(res.branches[b].final_mask, G, G))},
                        {"iou", res.branches[b].final_metric}});
  }
  return {{"mask_rle", rle_to_json(rle_encode(res.mask, G, G))},
          {"iou", iou(res.mask, s.example.truth)},
          {"branches", branches},
          {"provenance", res.provenance.to_json()}};
}

std::pair<int, json> Service::handle(const std::string& method, const std::string& path,
                                     const std::string& body,
                                     const std::map<std::string, std::string>& query) {
  static const std::regex session_route(R"(^/api/sessions/([A-Za-z0-9_-]+)/(run|advise|workflow)$)");
  try {
    if (method == "GET" && path == "/api/checkpoints") return {200, list_checkpoints()};
    if (method == "GET" && path == "/api/scenes") return {200, list_scenes(query)};
    if (method != "POST") throw ApiError(404, "not_found", method + " " + path);

    json parsed = json::object();
    if (!body.empty()) {
      parsed = json::parse(body, nullptr, false);
      if (parsed.is_discarded()) throw ApiError(400, "malformed_json", "request body is not valid JSON");
      if (!parsed.is_object()) throw ApiError(400, "bad_request", "request body must be a JSON object");
    }
    if (path == "/api/sessions") return {200, create_session(parsed)};
    std::smatch m;
    if (std::regex_match(path, m, session_route)) {
      auto s = session(m[1]);
      std::lock_guard lock(s->mutex);
      if (m[2] == "run") return {200, run(*s, parsed)};
      if (m[2] == "advise") return {200, advise(*s, parsed)};
      return {200, workflow(*s, parsed)};
    }
    throw ApiError(404, "not_found", method + " " + path);
  } catch (const ApiError& e) {
    return {e.status, error_body(e.code, e.what())};
  } catch (const json::exception& e) {
    return {422, error_body("invalid_argument", e.what())};
  } catch (const ConfigError& e) {
    return {422, error_body("invalid_argument", e.what())};
  } catch (const GenerationError& e) {
    return {422, error_body("generation_failed", e.what())};
  } catch (const std::exception& e) {
    return {500, error_body("internal", e.what())};
  }
}

bool Service::bind(const std::string& host, int port) {
  server_ = std::make_unique<httplib::Server>();
  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    auto [status, body] = handle(req.method, req.path, req.body, query);
    res.status = status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(body.dump(), "application/json");
  };
  server_->Get(R"(/api/.*)", dispatch);
  server_->Post(R"(/api/.*)", dispatch);
  server_->Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.status = 204;
  });
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
    return port_ > 0;
  }
  if (!server_->bind_to_port(host, port)) return false;
  port_ = port;
  return true;
}

void Service::listen_after_bind() {
  if (!server_) throw std::logic_error("bind() before listen_after_bind()");
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
}

}  // namespace aligndiff
