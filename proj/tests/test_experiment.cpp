#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "aligndiff/error.hpp"
#include "aligndiff/experiment.hpp"

using namespace aligndiff;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  return apply_overrides(ExperimentConfig{},
                         {"task.train_size=512", "task.test_size=12", "task.trace_size=40",
                          "train.epochs=10", "train.batch_size=16", "model.hidden=128",
                          "eval.steps=10", "eval.checkpoint_steps=[1,5,10]",
                          "eval.trace_steps=[10]"});
}

Trajectory fake_trajectory(const std::vector<Mask>& checkpoint_masks, const Mask& final_mask) {
  Trajectory tr;
  int t = 1000;
  for (const Mask& m : checkpoint_masks) {
    TrajectoryCheckpoint c;
    c.t = t;
    c.mask = m;
    tr.checkpoints.push_back(c);
    t -= 300;
  }
  tr.final_mask = final_mask;
  return tr;
}

}  // namespace

TEST_CASE("splits are deterministic and disjoint in seed space") {
  const ExperimentConfig cfg = tiny_config();
  const Dataset a = make_split(cfg, Split::test);
  const Dataset b = make_split(cfg, Split::test);
  REQUIRE(a.items.size() == 12);
  CHECK((a.items[3].scene.image == b.items[3].scene.image).all());
  CHECK(make_split(cfg, Split::train).base_seed != a.base_seed);
  for (const Example& ex : make_split(cfg, Split::hard).items) {
    CHECK(sharing_distractors(ex.scene, ex.target) >= 2);
  }
}

TEST_CASE("summarize: per-checkpoint oIoU and an argmax that dominates the final step") {
  Mask truth(4), good(4), half(4), none(4);
  truth << 1, 1, 0, 0;
  good << 1, 1, 0, 0;
  half << 1, 0, 0, 0;
  none << 0, 0, 0, 0;
  std::vector<Trajectory> trs{fake_trajectory({none, good, half}, half),
                              fake_trajectory({none, good, good}, half)};
  const EvalReport r = summarize(trs, {&truth, &truth}, 10);
  REQUIRE(r.checkpoint_oiou.size() == 3);
  CHECK(r.checkpoint_oiou[0] == 0.0);
  CHECK(r.checkpoint_oiou[1] == 1.0);
  CHECK(r.checkpoint_oiou[2] == doctest::Approx(3.0 / 4.0));
  CHECK(r.final_oiou == doctest::Approx(0.5));
  CHECK(r.argmax_index == 1);
  CHECK(r.argmax_t == 700);
  CHECK(r.best_oiou >= r.final_oiou);
  CHECK(r.late_drop() == doctest::Approx(0.5));
  CHECK(r.to_json()["argmax"]["t"] == 700);
}

TEST_CASE("group checkpoint timesteps") {
  const auto groups = uniform_profile(1000, 10);
  CHECK(group_checkpoint_timesteps(groups, 100) ==
        std::vector<int>{910, 810, 710, 610, 510, 410, 310, 210, 110, 10});
  CHECK(group_checkpoint_timesteps(groups, 25) ==
        std::vector<int>{920, 840, 720, 640, 520, 440, 320, 240, 120, 40});
  CHECK_THROWS_AS(group_checkpoint_timesteps(groups, 5), ConfigError);
}

TEST_CASE("spearman") {
  Eigen::VectorXd a(5), b(5), c(5), d(4), e(4);
  a << 1, 2, 3, 4, 5;
  b << 10, 20, 30, 40, 50;
  c << 5, 4, 3, 2, 1;
  CHECK(spearman(a, b) == doctest::Approx(1.0));
  CHECK(spearman(a, c) == doctest::Approx(-1.0));
  d << 1, 2, 2, 3;
  e << 1, 3, 2, 4;
  // Average ranks: d -> 1, 2.5, 2.5, 4; Pearson on ranks gives 0.9487.
  CHECK(spearman(d, e) == doctest::Approx(0.9486833).epsilon(1e-6));
}

TEST_CASE("run, persist, reload, estimate") {
  const fs::path dir = fs::temp_directory_path() / "aligndiff_runs_test";
  fs::remove_all(dir);
  const ExperimentConfig cfg = tiny_config();
  RunOptions opt;
  opt.runs_dir = dir.string();
  const RunResult r = run_experiment(cfg, opt);
  REQUIRE(r.record.status == "complete");
  REQUIRE(r.eval);
  CHECK(r.eval->checkpoint_ts == std::vector<int>{1000, 600, 100});
  CHECK(r.eval->best_oiou >= r.eval->final_oiou);
  for (const auto& name : {"config.json", "checkpoint.bin", "train_log.csv", "report.json"}) {
    CHECK(fs::exists(fs::path(r.record.dir) / name));
  }
  const LoadedRun back = load_run(r.record.dir);
  CHECK(back.config == cfg);
  CHECK(back.model.params.flatten() == r.model.params.flatten());

  // A second run with the same config gets a fresh id.
  const RunResult again = run_experiment(cfg, opt);
  CHECK(again.record.run_id != r.record.run_id);
  CHECK(again.model.params.flatten() == r.model.params.flatten());

  MetricTrace trace;
  const StatsEstimate est = estimate_profile(r.model, cfg, 10, &trace);
  CHECK(trace.sample_count() == 40);
  est.profile.validate();

  // Tampered config is detected.
  std::ofstream(fs::path(r.record.dir) / "config.json")
      << config_to_json(apply_overrides(cfg, {"train.seed=5"})).dump();
  CHECK_THROWS_AS(load_run(r.record.dir), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("ablation grid with a statistics cell") {
  const ExperimentConfig base = tiny_config();
  const nlohmann::json spec = {
      {"seeds", {0, 1}},
      {"cells", {{{"name", "uniform"}},
                 {{"name", "prob"}, {"stats_from", "uniform"}},
                 {{"name", "orphan"}, {"stats_from", "missing"}}}}};
  const auto [cells, seeds] = parse_ablation_spec(spec, base);
  REQUIRE(cells.size() == 3);
  const AblationReport rep = run_ablation(cells, seeds);
  REQUIRE(rep.rows.size() == 6);
  CHECK(rep.rows[0].status == "complete");
  CHECK(rep.rows[1].status == "complete");
  REQUIRE(rep.rows[1].profile);
  CHECK(rep.rows[1].profile->source == ProfileSource::statistics);
  CHECK(rep.rows[2].status.rfind("failed", 0) == 0);
  const auto sums = rep.summaries();
  REQUIRE(sums.size() == 3);
  CHECK(sums[0].completed == 2);
  CHECK(sums[2].completed == 0);
  CHECK(rep.to_csv().rfind("cell,completed,mean_oiou,std_oiou,oiou_t1000,oiou_t600,oiou_t100\n", 0) == 0);
  CHECK(rep.to_json()["cells"].size() == 3);

  // Cells share everything except the strategy keys.
  const auto diff = config_diff(with_stats_profile(base, *rep.rows[1].profile), base);
  CHECK(diff == std::vector<std::string>{"train.profile_source", "train.profile_weights", "train.strategy"});
}
