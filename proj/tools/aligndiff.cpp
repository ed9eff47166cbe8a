// Command-line front end: data generation, training, traces, profile
// estimation, evaluation, ablation grids, the correction workflow and the
// HTTP service.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "aligndiff/config.hpp"
#include "aligndiff/error.hpp"
#include "aligndiff/experiment.hpp"
#include "aligndiff/service.hpp"

namespace fs = std::filesystem;
using namespace aligndiff;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  ExperimentConfig load() const {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    return apply_overrides(cfg, overrides);
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON experiment config");
  app->add_option("--set", c.overrides, "Override a key, e.g. train.epochs=10")->take_all();
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "trace") return Split::trace;
  if (s == "hard") return Split::hard;
  throw ConfigError("unknown split '" + s + "'");
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

// Run-directory config with command-line overrides applied to the eval side.
LoadedRun load_with_overrides(const std::string& run_dir, const std::vector<std::string>& sets) {
  LoadedRun run = load_run(run_dir);
  run.config = apply_overrides(run.config, sets);
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perception-aligned toy diffusion toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string split = "train", eval_split = "test", workflow_split = "hard", out_dir, runs_dir = "runs", run_id, run_dir, spec_path,
              source = "statistics", host = "127.0.0.1";
  int steps = 0, k = 0, port = 8080;

  auto* gen = app.add_subcommand("gen-data", "Generate a dataset split");
  add_common(gen, common);
  gen->add_option("--split", split, "train | test | trace | hard");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train and evaluate one run");
  add_common(train_cmd, common);
  train_cmd->add_option("--runs", runs_dir, "Runs directory");
  train_cmd->add_option("--run-id", run_id, "Run identifier (default: hash and seed)");

  auto* trace_cmd = app.add_subcommand("trace", "Collect a metric trace for a run");
  trace_cmd->add_option("--run", run_dir, "Run directory")->required();
  trace_cmd->add_option("--steps", steps, "Sampling steps (default eval.trace_steps[0])");
  trace_cmd->add_option("--set", common.overrides, "Override a key")->take_all();

  auto* estimate_cmd = app.add_subcommand("estimate", "Estimate a contribution profile");
  estimate_cmd->add_option("--run", run_dir, "Run directory (reads trace.csv)");
  estimate_cmd->add_option("--source", source, "statistics | schedule");
  add_common(estimate_cmd, common);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a run with intermediate checkpoints");
  eval_cmd->add_option("--run", run_dir, "Run directory")->required();
  eval_cmd->add_option("--split", eval_split, "test | hard | trace | train");
  eval_cmd->add_option("--set", common.overrides, "Override a key")->take_all();

  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation grid over seeds");
  add_common(ablate_cmd, common);
  ablate_cmd->add_option("--spec", spec_path, "Ablation spec JSON")->required();
  ablate_cmd->add_option("--out", out_dir, "Report directory")->required();
  ablate_cmd->add_option("--runs", runs_dir, "Runs directory for per-cell artifacts");

  auto* workflow_cmd = app.add_subcommand("workflow", "Compare plain guidance with the correction workflow");
  workflow_cmd->add_option("--run", run_dir, "Run directory")->required();
  workflow_cmd->add_option("--split", workflow_split, "Split to evaluate");
  workflow_cmd->add_option("--k", k, "Negatives per scene (default workflow.k)");
  workflow_cmd->add_option("--set", common.overrides, "Override a key")->take_all();

  auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP API");
  serve_cmd->add_option("--runs", runs_dir, "Runs directory with checkpoints");
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port");

  auto* demo_cmd = app.add_subcommand("demo", "Small end-to-end run in about a minute");
  demo_cmd->add_option("--runs", runs_dir, "Runs directory");
  add_common(demo_cmd, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const ExperimentConfig cfg = common.load();
      const Dataset d = make_split(cfg, parse_split(split));
      write_dataset(out_dir, d);
      std::cout << "wrote " << d.items.size() << " " << split << " examples to " << out_dir << '\n';
    } else if (train_cmd->parsed()) {
      const ExperimentConfig cfg = common.load();
      RunOptions ro;
      ro.runs_dir = runs_dir;
      ro.run_id = run_id;
      ro.verbose = true;
      const RunResult r = run_experiment(cfg, ro);
      std::cout << json{{"run", r.record.to_json()},
                        {"eval", r.eval ? r.eval->to_json() : json(nullptr)},
                        {"error", r.error}}
                       .dump(2)
                << '\n';
      return r.record.status == "complete" ? 0 : 2;
    } else if (trace_cmd->parsed()) {
      const LoadedRun run = load_with_overrides(run_dir, common.overrides);
      const int s = steps > 0 ? steps : run.config.eval.trace_steps.front();
      MetricTrace trace;
      const StatsEstimate est = estimate_profile(run.model, run.config, s, &trace);
      std::ofstream f(fs::path(run_dir) / "trace.csv");
      write_trace_csv(f, trace);
      std::cout << "wrote trace.csv (" << trace.sample_count() << " samples, " << trace.group_count()
                << " groups); cumulative R^2 " << est.cumulative_r_squared.transpose() << '\n';
    } else if (estimate_cmd->parsed()) {
      ContributionProfile profile;
      ExperimentConfig cfg = run_dir.empty() ? common.load() : load_with_overrides(run_dir, common.overrides).config;
      const NoiseSchedule schedule = cfg.schedule.build();
      if (source == "schedule") {
        profile = schedule_profile(schedule, cfg.train.groups);
      } else if (source == "statistics") {
        if (run_dir.empty()) throw ConfigError("--source statistics needs --run with a trace.csv");
        std::ifstream f(fs::path(run_dir) / "trace.csv");
        if (!f) throw ConfigError("no trace.csv in " + run_dir + "; run `trace` first");
        profile = stats_profile(read_trace_csv(f), schedule.steps(), cfg.train.floor);
      } else {
        throw ConfigError("unknown source '" + source + "'");
      }
      const std::string text = profile_to_json(profile);
      if (!run_dir.empty()) std::ofstream(fs::path(run_dir) / "profile.json") << text << '\n';
      std::cout << text << '\n';
    } else if (eval_cmd->parsed()) {
      const LoadedRun run = load_with_overrides(run_dir, common.overrides);
      const NoiseSchedule schedule = run.config.schedule.build();
      const EvalReport r = evaluate(run.model, make_split(run.config, parse_split(eval_split)), schedule,
                                    build_sampler_options(run.config, schedule),
                                    run.config.guidance, run.config.eval.seed);
      json j = r.to_json();
      j["split"] = eval_split;
      write_json(fs::path(run_dir) / ("eval_" + eval_split + ".json"), j);
      std::cout << j.dump(2) << '\n';
    } else if (ablate_cmd->parsed()) {
      std::ifstream f(spec_path);
      if (!f) throw ConfigError("cannot open " + spec_path);
      const auto [cells, seeds] = parse_ablation_spec(json::parse(f), common.load());
      RunOptions ro;
      ro.runs_dir = runs_dir;
      ro.verbose = true;
      const AblationReport report = run_ablation(cells, seeds, ro);
      fs::create_directories(out_dir);
      write_json(fs::path(out_dir) / "report.json", report.to_json());
      std::ofstream(fs::path(out_dir) / "report.csv") << report.to_csv();
      std::cout << report.to_csv();
    } else if (workflow_cmd->parsed()) {
      const LoadedRun run = load_with_overrides(run_dir, common.overrides);
      const ExperimentConfig& cfg = run.config;
      const NoiseSchedule schedule = cfg.schedule.build();
      const Dataset data = make_split(cfg, parse_split(workflow_split));
      SamplerOptions options = build_sampler_options(cfg, schedule);
      options.checkpoint_ts.clear();
      const int kk = k > 0 ? k : cfg.workflow.k;
      const EvalReport plain = evaluate(run.model, data, schedule, options, cfg.guidance, cfg.eval.seed);
      std::vector<WorkflowItem> items;
      for (std::size_t i = 0; i < data.items.size(); ++i) {
        items.push_back({&data.items[i].scene, data.items[i].condition, &data.items[i].truth,
                         derive_seed(cfg.eval.seed, i)});
      }
      const auto results = run_correction_workflows(run.model, items, kk, cfg.guidance, schedule, options);
      std::vector<Mask> pred, truth;
      for (std::size_t i = 0; i < results.size(); ++i) {
        pred.push_back(results[i].mask);
        truth.push_back(data.items[i].truth);
      }
      const json j{{"split", workflow_split},
                   {"k", kk},
                   {"plain_oiou", plain.final_oiou},
                   {"workflow_oiou", oiou(pred, truth)},
                   {"example_provenance", results.front().provenance.to_json()}};
      write_json(fs::path(run_dir) / ("workflow_" + workflow_split + ".json"), j);
      std::cout << j.dump(2) << '\n';
    } else if (serve_cmd->parsed()) {
      Service service;
      const int n = service.add_runs_dir(runs_dir);
      if (n == 0) throw ConfigError("no checkpoints under " + runs_dir + "; train a run first");
      if (!service.bind(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
      std::cout << "serving " << n << " checkpoint(s) on http://" << host << ':' << service.port() << '\n';
      service.listen_after_bind();
    } else if (demo_cmd->parsed()) {
      std::vector<std::string> sets{"task.train_size=2000", "task.test_size=200", "task.trace_size=100",
                                    "train.epochs=10", "augment.enabled=true",
                                    "train.profile_source=schedule", "train.strategy=prob_scaling"};
      sets.insert(sets.end(), common.overrides.begin(), common.overrides.end());
      const ExperimentConfig cfg = apply_overrides(
          common.config_path.empty() ? ExperimentConfig{} : load_config(common.config_path), sets);
      RunOptions ro;
      ro.runs_dir = runs_dir;
      ro.run_id = "demo";
      if (fs::exists(fs::path(runs_dir) / "demo")) fs::remove_all(fs::path(runs_dir) / "demo");
      const RunResult r = run_experiment(cfg, ro);
      if (!r.eval) throw std::runtime_error(r.error);
      std::cout << "demo run in " << r.record.dir << "\n  final loss " << r.log.back().loss
                << "\n  test oIoU per checkpoint:";
      for (std::size_t c = 0; c < r.eval->checkpoint_ts.size(); ++c) {
        std::cout << " t=" << r.eval->checkpoint_ts[c] << ':' << r.eval->checkpoint_oiou[c];
      }
      std::cout << "\n  final oIoU " << r.eval->final_oiou << " (best at t=" << r.eval->argmax_t << ")\n";
      const StatsEstimate est = estimate_profile(r.model, cfg, 50);
      std::cout << "  statistics profile (ascending t): " << est.profile.weights.transpose() << '\n';
      std::cout << "serve it with: aligndiff serve --runs " << runs_dir << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
