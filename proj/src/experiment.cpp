#include "aligndiff/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "aligndiff/error.hpp"

namespace aligndiff {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::test:
      return "test";
    case Split::trace:
      return "trace";
    case Split::hard:
      return "hard";
  }
  return "?";
}

Dataset make_split(const ExperimentConfig& cfg, Split split) {
  const auto& t = cfg.task;
  switch (split) {
    case Split::train:
      return generate_dataset(t.generator, t.train_size, derive_seed(t.seed, 0));
    case Split::test:
      return generate_dataset(t.generator, t.test_size, derive_seed(t.seed, 1));
    case Split::trace:
      return generate_dataset(t.generator, t.trace_size, derive_seed(t.seed, 2));
    case Split::hard: {
      TaskConfig hard = t.generator;
      hard.min_sharing_distractors = std::max(2, hard.min_sharing_distractors);
      hard.min_objects = std::max(3, hard.min_objects);
      hard.max_objects = std::max(hard.min_objects, hard.max_objects);
      return generate_dataset(hard, t.test_size, derive_seed(t.seed, 3));
    }
  }
  throw std::invalid_argument("unknown split");
}

double EvalReport::late_drop() const {
  if (checkpoint_oiou.empty()) return 0.0;
  return *std::max_element(checkpoint_oiou.begin(), checkpoint_oiou.end()) - final_oiou;
}

json EvalReport::to_json() const {
  json cps = json::array();
  for (std::size_t i = 0; i < checkpoint_ts.size(); ++i) {
    cps.push_back({{"t", checkpoint_ts[i]}, {"oiou", checkpoint_oiou[i]}});
  }
  return {{"steps", steps},
          {"checkpoints", cps},
          {"final_oiou", final_oiou},
          {"argmax", {{"index", argmax_index}, {"t", argmax_t}, {"oiou", best_oiou}}},
          {"late_drop", late_drop()},
          {"samples", sample_final_iou.size()}};
}

EvalReport summarize(const std::vector<Trajectory>& trajectories,
                     const std::vector<const Mask*>& truths, int steps) {
  if (trajectories.empty() || trajectories.size() != truths.size()) {
    throw ShapeError("summarize needs one truth mask per trajectory");
  }
  EvalReport r;
  r.steps = steps;
  const std::size_t C = trajectories.front().checkpoints.size();
  std::vector<Mask> truth;
  for (const Mask* m : truths) truth.push_back(*m);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<Mask> pred;
    for (const auto& tr : trajectories) {
      if (tr.checkpoints.size() != C) throw ShapeError("trajectories disagree on checkpoints");
      pred.push_back(tr.checkpoints[c].mask);
    }
    r.checkpoint_ts.push_back(trajectories.front().checkpoints[c].t);
    r.checkpoint_oiou.push_back(oiou(pred, truth));
  }
  std::vector<Mask> finals;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    finals.push_back(trajectories[i].final_mask);
    r.sample_final_iou.push_back(iou(trajectories[i].final_mask, truth[i]));
  }
  r.final_oiou = oiou(finals, truth);

  r.best_oiou = r.final_oiou;
  r.argmax_index = int(C);
  r.argmax_t = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (r.checkpoint_oiou[c] >= r.best_oiou) {
      r.best_oiou = r.checkpoint_oiou[c];
      r.argmax_index = int(c);
      r.argmax_t = r.checkpoint_ts[c];
    }
  }
  return r;
}

EvalReport evaluate(const TrainedModel& model, const Dataset& data, const NoiseSchedule& schedule,
                    const SamplerOptions& options, const GuidanceWeights& w,
                    std::uint64_t seed) {
  if (data.items.empty()) throw std::invalid_argument("evaluation dataset is empty");
  std::vector<SampleRequest> requests;
  std::vector<const Mask*> truths;
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    const Example& ex = data.items[i];
    requests.push_back({&ex.scene, ex.condition, std::nullopt, &ex.truth, derive_seed(seed, i)});
    truths.push_back(&ex.truth);
  }
  return summarize(sample_trajectories(model, requests, w, schedule, options), truths,
                   options.steps);
}

std::vector<int> group_checkpoint_timesteps(const ContributionProfile& groups, int steps) {
  const auto grid = ddim_timesteps(groups.steps(), steps);
  std::vector<int> ts;
  for (int b = groups.group_count() - 1; b >= 0; --b) {
    const int lo = groups.group_bounds[b], hi = groups.group_bounds[b + 1];
    int best = -1;
    for (int t : grid) {
      if (t > lo && t <= hi) best = t;
    }
    if (best < 0) {
      throw ConfigError("group (" + std::to_string(lo) + ", " + std::to_string(hi) +
                        "] has no timestep on the " + std::to_string(steps) + "-step grid");
    }
    ts.push_back(best);
  }
  return ts;
}

MetricTrace collect_trace(const TrainedModel& model, const Dataset& data,
                          const NoiseSchedule& schedule, int steps, int B,
                          const GuidanceWeights& w, std::uint64_t seed,
                          const MaskExtractionConfig& extraction, int max_batch, bool clip_x0) {
  if (data.items.empty()) throw std::invalid_argument("trace dataset is empty");
  const auto groups = uniform_profile(schedule.steps(), B);
  SamplerOptions options;
  options.steps = steps;
  options.checkpoint_ts = group_checkpoint_timesteps(groups, steps);
  options.extraction = extraction;
  options.max_batch = max_batch;
  options.clip_x0 = clip_x0;

  std::vector<SampleRequest> requests;
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    const Example& ex = data.items[i];
    requests.push_back({&ex.scene, ex.condition, std::nullopt, &ex.truth, derive_seed(seed, i)});
  }
  const auto trajectories = sample_trajectories(model, requests, w, schedule, options);

  MetricTrace trace;
  const int N = int(trajectories.size());
  trace.checkpoint_metrics.resize(N, B);
  trace.final_metrics.resize(N);
  trace.checkpoint_timesteps = options.checkpoint_ts;
  for (int i = 0; i < N; ++i) {
    for (int b = 0; b < B; ++b) trace.checkpoint_metrics(i, b) = trajectories[i].checkpoints[b].metric;
    trace.final_metrics[i] = trajectories[i].final_metric;
  }
  return trace;
}

json RunRecord::to_json() const {
  return {{"run_id", run_id},     {"config_hash", config_hash}, {"checkpoint", checkpoint_path},
          {"artifacts", artifacts}, {"started", started},       {"finished", finished},
          {"seed", seed},         {"status", status}};
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fresh_run_id(const std::string& runs_dir, const ExperimentConfig& cfg) {
  const std::string base = config_hash(cfg).substr(0, 10) + "-s" + std::to_string(cfg.train.seed);
  std::string id = base;
  for (int n = 2; fs::exists(fs::path(runs_dir) / id); ++n) id = base + "-" + std::to_string(n);
  return id;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const NoiseSchedule schedule = cfg.schedule.build();
  RunResult result;
  RunRecord& rec = result.record;
  rec.config_hash = config_hash(cfg);
  rec.seed = cfg.train.seed;
  rec.started = utc_now();
  rec.status = "running";
  if (!options.runs_dir.empty()) {
    rec.run_id = options.run_id.empty() ? fresh_run_id(options.runs_dir, cfg) : options.run_id;
    rec.dir = (fs::path(options.runs_dir) / rec.run_id).string();
    fs::create_directories(rec.dir);
    save_config((fs::path(rec.dir) / "config.json").string(), cfg);
    rec.artifacts.push_back("config.json");
  }

  const Dataset train_set = make_split(cfg, Split::train);
  const Dataset test_set = make_split(cfg, Split::test);
  const TrainConfig tc = build_train_config(cfg, schedule);
  const TargetKind kind = cfg.target_kind();
  SamplerOptions sampler = build_sampler_options(cfg, schedule);

  ValidationFn validate;
  if (tc.eval_every > 0) {
    validate = [&](const DenoiserParams<float>& p) {
      Dataset subset{test_set.config, test_set.base_seed, {}};
      for (std::size_t i = 0; i < std::min<std::size_t>(64, test_set.items.size()); ++i) {
        subset.items.push_back(test_set.items[i]);
      }
      SamplerOptions quick = sampler;
      quick.steps = std::min(25, cfg.eval.steps);
      quick.checkpoint_ts.clear();
      return evaluate({p, kind}, subset, schedule, quick, cfg.guidance, cfg.eval.seed).final_oiou;
    };
  }

  try {
    TrainResult tr = train(train_set, cfg.model, tc, schedule, validate);
    result.model = {std::move(tr.params), kind};
    result.log = std::move(tr.log);
  } catch (const DivergenceError& e) {
    rec.status = "failed";
    rec.finished = utc_now();
    result.error = e.what();
    if (!rec.dir.empty()) {
      std::ofstream(fs::path(rec.dir) / "report.json")
          << json{{"run", rec.to_json()}, {"error", result.error}}.dump(2) << '\n';
    }
    return result;
  }
  if (options.verbose && !result.log.empty()) {
    std::cerr << "trained " << cfg.train.epochs << " epochs, final loss "
              << result.log.back().loss << '\n';
  }

  if (!rec.dir.empty()) {
    CheckpointHeader h;
    h.model = cfg.model;
    h.target_kind = kind;
    h.config_hash = rec.config_hash;
    h.seed = cfg.train.seed;
    h.schedule_steps = cfg.schedule.T;
    h.beta_min = cfg.schedule.beta_min;
    h.beta_max = cfg.schedule.beta_max;
    rec.checkpoint_path = (fs::path(rec.dir) / "checkpoint.bin").string();
    write_checkpoint(rec.checkpoint_path, result.model.params, h);
    std::ofstream log(fs::path(rec.dir) / "train_log.csv");
    write_train_log_csv(log, result.log);
    rec.artifacts.push_back("checkpoint.bin");
    rec.artifacts.push_back("train_log.csv");
  }

  if (options.evaluate) {
    result.eval = evaluate(result.model, test_set, schedule, sampler, cfg.guidance, cfg.eval.seed);
  }
  rec.status = "complete";
  rec.finished = utc_now();
  if (!rec.dir.empty()) {
    rec.artifacts.push_back("report.json");
    json report{{"run", rec.to_json()}};
    if (result.eval) report["eval"] = result.eval->to_json();
    std::ofstream(fs::path(rec.dir) / "report.json") << report.dump(2) << '\n';
  }
  return result;
}

LoadedRun load_run(const std::string& run_dir) {
  LoadedRun run;
  run.config = load_config((fs::path(run_dir) / "config.json").string());
  auto [params, header] = read_checkpoint((fs::path(run_dir) / "checkpoint.bin").string());
  if (header.config_hash != config_hash(run.config)) {
    throw FormatError(run_dir + ": checkpoint was trained with a different config");
  }
  run.model = {std::move(params), header.target_kind};
  run.header = header;
  return run;
}

StatsEstimate estimate_profile(const TrainedModel& model, const ExperimentConfig& cfg, int steps,
                               MetricTrace* trace_out) {
  const NoiseSchedule schedule = cfg.schedule.build();
  const Dataset trace_set = make_split(cfg, Split::trace);
  MaskExtractionConfig extraction;
  extraction.delta = cfg.eval.delta;
  MetricTrace trace = collect_trace(model, trace_set, schedule, steps, cfg.train.groups,
                                    cfg.guidance, derive_seed(cfg.eval.seed, 99), extraction,
                                    cfg.eval.max_batch, cfg.eval.clip_x0);
  StatsEstimate est = estimate_stats(trace, schedule.steps(), cfg.train.floor);
  if (trace_out) *trace_out = std::move(trace);
  return est;
}

ExperimentConfig with_stats_profile(const ExperimentConfig& cfg, const ContributionProfile& p,
                                    StrategyKind kind) {
  ExperimentConfig out = cfg;
  out.train.strategy = kind;
  out.train.profile_source = ProfileSource::statistics;
  out.train.profile_weights.assign(p.weights.data(), p.weights.data() + p.weights.size());
  out.train.groups = p.group_count();
  out.validate();
  return out;
}

std::vector<AblationReport::Summary> AblationReport::summaries() const {
  std::vector<Summary> out;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::vector<const EvalReport*>> evals;
  for (const auto& row : rows) {
    if (!index.count(row.cell)) {
      index[row.cell] = out.size();
      out.push_back({row.cell, 0, 0.0, 0.0, {}});
    }
    if (row.eval) evals[row.cell].push_back(&*row.eval);
  }
  for (auto& s : out) {
    const auto& es = evals[s.cell];
    s.completed = int(es.size());
    if (es.empty()) continue;
    double sum = 0.0;
    for (const auto* e : es) sum += e->final_oiou;
    s.mean_oiou = sum / double(es.size());
    double ss = 0.0;
    for (const auto* e : es) ss += (e->final_oiou - s.mean_oiou) * (e->final_oiou - s.mean_oiou);
    s.std_oiou = es.size() > 1 ? std::sqrt(ss / double(es.size() - 1)) : 0.0;
    s.mean_curve.assign(es.front()->checkpoint_oiou.size(), 0.0);
    for (const auto* e : es) {
      for (std::size_t c = 0; c < s.mean_curve.size(); ++c) {
        s.mean_curve[c] += e->checkpoint_oiou[c] / double(es.size());
      }
    }
  }
  return out;
}

json AblationReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    json j{{"cell", r.cell}, {"seed", r.seed}, {"config_hash", r.config_hash}, {"status", r.status}};
    if (r.eval) j["eval"] = r.eval->to_json();
    if (r.profile) j["profile"] = json::parse(profile_to_json(*r.profile));
    rows_j.push_back(j);
  }
  json cells = json::array();
  for (const auto& s : summaries()) {
    cells.push_back({{"cell", s.cell},
                     {"completed", s.completed},
                     {"mean_oiou", s.mean_oiou},
                     {"std_oiou", s.std_oiou},
                     {"mean_curve", s.mean_curve}});
  }
  return {{"rows", rows_j}, {"cells", cells}};
}

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out.precision(8);
  std::vector<int> ts;
  for (const auto& r : rows) {
    if (r.eval) {
      ts = r.eval->checkpoint_ts;
      break;
    }
  }
  out << "cell,completed,mean_oiou,std_oiou";
  for (int t : ts) out << ",oiou_t" << t;
  out << '\n';
  for (const auto& s : summaries()) {
    out << s.cell << ',' << s.completed << ',' << s.mean_oiou << ',' << s.std_oiou;
    for (std::size_t c = 0; c < ts.size(); ++c) {
      out << ',';
      if (c < s.mean_curve.size()) out << s.mean_curve[c];
    }
    out << '\n';
  }
  return out.str();
}

AblationReport run_ablation(const std::vector<AblationCell>& cells,
                            const std::vector<std::uint64_t>& seeds, const RunOptions& options) {
  AblationReport report;
  for (std::uint64_t seed : seeds) {
    std::map<std::string, TrainedModel> models;
    for (const AblationCell& cell : cells) {
      AblationRow row;
      row.cell = cell.name;
      row.seed = seed;
      ExperimentConfig cfg = cell.config;
      cfg.train.seed = seed;
      try {
        if (!cell.stats_from.empty()) {
          const auto it = models.find(cell.stats_from);
          if (it == models.end()) {
            throw ConfigError("cell '" + cell.name + "' needs a completed '" + cell.stats_from +
                              "' cell earlier in the grid");
          }
          const StatsEstimate est = estimate_profile(it->second, cfg, cfg.eval.trace_steps.front());
          cfg = with_stats_profile(cfg, est.profile, StrategyKind::prob_scaling);
          row.profile = est.profile;
        }
        RunOptions ro = options;
        if (!ro.runs_dir.empty()) ro.run_id = cell.name + "-s" + std::to_string(seed);
        RunResult res = run_experiment(cfg, ro);
        row.config_hash = res.record.config_hash;
        row.status = res.record.status;
        row.eval = res.eval;
        if (res.record.status == "complete") models[cell.name] = std::move(res.model);
        if (options.verbose && res.eval) {
          std::cerr << cell.name << " seed " << seed << ": oIoU " << res.eval->final_oiou << '\n';
        }
      } catch (const std::exception& e) {
        row.status = std::string("failed: ") + e.what();
      }
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

std::pair<std::vector<AblationCell>, std::vector<std::uint64_t>> parse_ablation_spec(
    const json& spec, const ExperimentConfig& base) {
  ExperimentConfig root = base;
  if (spec.contains("base")) {
    json merged = config_to_json(base);
    merged.merge_patch(spec["base"]);
    root = config_from_json(merged);
  }
  std::vector<std::uint64_t> seeds{0, 1, 2};
  if (spec.contains("seeds")) seeds = spec["seeds"].get<std::vector<std::uint64_t>>();
  std::vector<AblationCell> cells;
  for (const auto& c : spec.at("cells")) {
    AblationCell cell;
    cell.name = c.at("name");
    cell.config = apply_overrides(root, c.value("set", std::vector<std::string>{}));
    cell.stats_from = c.value("stats_from", std::string());
    cells.push_back(std::move(cell));
  }
  return {cells, seeds};
}

namespace {

Eigen::VectorXd ranks(const Eigen::VectorXd& v) {
  const Eigen::Index n = v.size();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  Eigen::VectorXd r(n);
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman needs equal lengths >= 2");
  const Eigen::VectorXd ra = ranks(a).array() - ranks(a).mean();
  const Eigen::VectorXd rb = ranks(b).array() - ranks(b).mean();
  const double den = std::sqrt(ra.squaredNorm() * rb.squaredNorm());
  if (den == 0.0) return 0.0;
  return ra.dot(rb) / den;
}

}  // namespace aligndiff
