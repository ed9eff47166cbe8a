#include <doctest.h>

#include <filesystem>

#include "aligndiff/config.hpp"
#include "aligndiff/error.hpp"

using namespace aligndiff;
using nlohmann::json;

TEST_CASE("defaults round trip through JSON") {
  const ExperimentConfig d;
  const ExperimentConfig back = config_from_json(config_to_json(d));
  CHECK(back == d);
  CHECK(config_hash(back) == config_hash(d));
  CHECK(config_hash(d).size() == 16);
  d.validate();
}

TEST_CASE("partial documents keep defaults") {
  const ExperimentConfig c = config_from_json(json::parse(R"({"train": {"epochs": 3}, "augment": {"enabled": true}})"));
  CHECK(c.train.epochs == 3);
  CHECK(c.augment.enabled);
  CHECK(c.train.batch_size == ExperimentConfig{}.train.batch_size);
  CHECK(c.target_kind() == TargetKind::x0);
}

TEST_CASE("unknown keys are rejected with their path") {
  try {
    config_from_json(json::parse(R"({"train": {"epochz": 3}})"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.epochz") != std::string::npos);
  }
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"trainer": {}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"train": {"strategy": "bogus"}})")), ConfigError);
}

TEST_CASE("hash is stable under key order and sensitive to values") {
  const json a = json::parse(R"({"train": {"epochs": 4, "batch_size": 32}, "eval": {"steps": 100}})");
  const json b = json::parse(R"({"eval": {"steps": 100}, "train": {"batch_size": 32, "epochs": 4}})");
  CHECK(config_hash(config_from_json(a)) == config_hash(config_from_json(b)));
  const json c = json::parse(R"({"eval": {"steps": 100}, "train": {"batch_size": 32, "epochs": 5}})");
  CHECK(config_hash(config_from_json(a)) != config_hash(config_from_json(c)));
  // FNV-1a 64 reference values.
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("overrides") {
  const ExperimentConfig c = apply_overrides(ExperimentConfig{}, {"train.strategy=prob_scaling", "train.epochs=7",
                                                                 "augment.intensity_multiplier=0.5",
                                                                 "eval.checkpoint_steps=[1,2]"});
  CHECK(c.train.strategy == StrategyKind::prob_scaling);
  CHECK(c.train.epochs == 7);
  CHECK(c.augment.intensity_multiplier == 0.5);
  CHECK(c.eval.checkpoint_steps == std::vector<int>{1, 2});
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"train.nope=1"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"no_equals_sign"}), ConfigError);
}

TEST_CASE("ablation hygiene: strategy cells differ only in strategy keys") {
  const ExperimentConfig base;
  const ExperimentConfig prob = apply_overrides(base, {"train.strategy=prob_scaling", "train.profile_source=schedule"});
  const auto diff = config_diff(base, prob);
  CHECK(diff == std::vector<std::string>{"train.profile_source", "train.strategy"});
}

TEST_CASE("validation") {
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"train.cond_drop_prob=1.5"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"train.learning_rate=-0.001"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"eval.checkpoint_steps=[0]"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"model.grid=8"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"augment.blur_kernel=4"}), ConfigError);
}

TEST_CASE("strategy and sampler construction") {
  const NoiseSchedule sched = ScheduleSection{}.build();
  ExperimentConfig c = apply_overrides(ExperimentConfig{}, {"train.strategy=loss_scaling", "train.profile_source=schedule"});
  const TimestepStrategy s = build_strategy(c, sched);
  CHECK(s.kind == StrategyKind::loss_scaling);
  CHECK(s.profile.source == ProfileSource::schedule);

  c = apply_overrides(ExperimentConfig{}, {"train.strategy=prob_scaling", "train.profile_source=statistics",
                                           "train.profile_weights=[0.01,0.01,0.01,0.01,0.01,0.01,0.01,0.01,0.01,0.91]"});
  const TimestepStrategy st = build_strategy(c, sched);
  CHECK(st.profile.weights[9] == doctest::Approx(0.91));

  c.train.profile_weights.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(apply_overrides(ExperimentConfig{}, {"train.profile_source=statistics"}), ConfigError);

  const SamplerOptions opt = build_sampler_options(ExperimentConfig{}, sched);
  CHECK(opt.checkpoint_ts == std::vector<int>{990, 810, 610, 410, 210, 10});
}

TEST_CASE("save and load") {
  const auto path = (std::filesystem::temp_directory_path() / "aligndiff_cfg.json").string();
  const ExperimentConfig c = apply_overrides(ExperimentConfig{}, {"train.seed=9", "task.train_size=64"});
  save_config(path, c);
  CHECK(load_config(path) == c);
  std::filesystem::remove(path);
}
