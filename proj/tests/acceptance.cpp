// Acceptance run: one PASS/FAIL line per criterion. Criteria 5-11 train
// real models on the default toy task, so a full run takes tens of minutes.
// Extra arguments are config overrides (section.key=value) for the trained
// criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <Eigen/QR>

#include "aligndiff/error.hpp"
#include "aligndiff/experiment.hpp"

using namespace aligndiff;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
nlohmann::json record = nlohmann::json::object();

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  record[std::to_string(id)] = {{"pass", pass}, {"detail", detail}};
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string join(const std::vector<double>& v, const char* f = "%.4f") {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt(f, v[i]);
  return out + "]";
}

// 1. Scheduler identities on random tensors.
void scheduler_identities() {
  const auto start = Clock::now();
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(101);
  std::uniform_int_distribution<int> pick(1, 1000);
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    const int t = pick(rng);
    const SampleD x0 = standard_normal<double>(768, rng);
    const SampleD aug = standard_normal<double>(768, rng);
    const SampleD eps = standard_normal<double>(768, rng);
    const SampleD xt = forward_diffuse(x0, t, eps, s);
    const double scale = x0.abs().maxCoeff();
    worst = std::max(worst, (predict_x0(xt, eps, t, s) - x0).abs().maxCoeff() / std::max(1.0, scale));
    const SampleD lhs = forward_diffuse(aug, t, eps, s);
    const SampleD rhs = std::sqrt(s.alpha_bar(t)) * x0 +
                        std::sqrt(1 - s.alpha_bar(t)) * corrected_epsilon(x0, aug, eps, t, s);
    worst = std::max(worst, (lhs - rhs).abs().maxCoeff());
    worst = std::max(worst, (corrected_epsilon(x0, x0, eps, t, s) - eps).abs().maxCoeff());
    worst = std::max(worst, (ddim_step(xt, eps, TargetKind::eps, t, 0, s) - x0).abs().maxCoeff());
    worst = std::max(worst, (ddim_step(xt, x0, TargetKind::x0, t, 0, s) - x0).abs().maxCoeff());
    if (t > 1) {
      const int prev = std::uniform_int_distribution<int>(1, t - 1)(rng);
      worst = std::max(worst, (ddim_step(xt, eps, TargetKind::eps, t, prev, s) -
                               forward_diffuse(x0, prev, eps, s)).abs().maxCoeff());
    }
  }
  const double secs = seconds_since(start);
  report(1, worst <= 1e-10 && secs < 1.0,
         "max deviation " + fmt("%.2e", worst) + " over 1000 tensors in " + fmt("%.2f", secs) + " s");
}

double qr_r_squared(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  Eigen::MatrixXd A(X.rows(), X.cols() + 1);
  A.col(0).setOnes();
  A.rightCols(X.cols()) = X;
  const Eigen::VectorXd beta = A.householderQr().solve(y);
  const double ss_tot = (y.array() - y.mean()).matrix().squaredNorm();
  return 1.0 - (y - A * beta).squaredNorm() / ss_tot;
}

// 2. Statistics profile against an independent regression oracle.
void stats_oracle() {
  const auto start = Clock::now();
  double worst = 0.0;
  bool nonneg = true, bounded = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    MetricTrace trace;
    trace.checkpoint_metrics.resize(200, 10);
    trace.final_metrics.resize(200);
    const double mix = uniform(rng, 0.2, 1.0);
    for (int i = 0; i < 200; ++i) {
      double acc = 0.0;
      for (int b = 0; b < 10; ++b) {
        const double m = uniform(rng, 0, 1);
        trace.checkpoint_metrics(i, b) = m;
        acc += std::pow(mix, 10 - b) * m;
      }
      trace.final_metrics[i] = std::clamp(acc / 3 + uniform(rng, -0.2, 0.2), 0.0, 1.0);
    }
    const StatsEstimate est = estimate_stats(trace, 1000, 0.01);
    double prev = 0.0;
    for (int k = 0; k < 10; ++k) {
      const double r2 = qr_r_squared(trace.checkpoint_metrics.leftCols(k + 1), trace.final_metrics);
      worst = std::max(worst, std::abs(est.raw_increments[k] - (r2 - prev)));
      nonneg = nonneg && est.raw_increments[k] >= -1e-12;
      prev = r2;
    }
    bounded = bounded && est.raw_increments.sum() <= 1.0 + 1e-12;
  }
  bool rejects = false;
  try {
    MetricTrace flat;
    flat.checkpoint_metrics = Eigen::MatrixXd::Random(200, 10).cwiseAbs();
    flat.final_metrics = Eigen::VectorXd::Constant(200, 0.5);
    estimate_stats(flat, 1000, 0.01);
  } catch (const DegenerateTargetError&) {
    rejects = true;
  }
  const double secs = seconds_since(start);
  report(2, worst <= 1e-9 && nonneg && bounded && rejects && secs < 5.0,
         "max |increment - oracle| " + fmt("%.2e", worst) + ", non-negative " + (nonneg ? "yes" : "no") +
             ", sum <= 1 " + (bounded ? "yes" : "no") + ", degenerate rejected " + (rejects ? "yes" : "no") +
             ", " + fmt("%.2f", secs) + " s");
}

// 3. Guidance reductions.
void guidance_degeneracies() {
  const auto start = Clock::now();
  Rng rng(7);
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    const GuidanceWeights w{uniform(rng, 0, 3), uniform(rng, 0, 8), uniform(rng, 0, 5)};
    const Eigen::ArrayXd u = standard_normal<double>(64, rng), i = standard_normal<double>(64, rng),
                         g = standard_normal<double>(64, rng), f = standard_normal<double>(64, rng),
                         g2 = standard_normal<double>(64, rng);
    worst = std::max(worst, (compose_guidance(u, i, i, f, w, true) - compose_guidance(u, i, g, f, w, false)).abs().maxCoeff());
    const GuidanceWeights c{w.w_I, w.w_D_neg, w.w_D_neg};
    worst = std::max(worst, (compose_guidance(u, i, g, g, w, true) - compose_guidance(u, i, g, g, c, false)).abs().maxCoeff());
    const double a = uniform(rng, -2, 2);
    const Eigen::ArrayXd mixed = compose_guidance(u, i, Eigen::ArrayXd(a * g + (1 - a) * g2), f, w, true);
    const Eigen::ArrayXd split = a * compose_guidance(u, i, g, f, w, true) + (1 - a) * compose_guidance(u, i, g2, f, w, true);
    worst = std::max(worst, (mixed - split).abs().maxCoeff());
  }
  Eigen::ArrayXd u(1), i(1), g(1), f(1);
  u << 0;
  i << 1;
  g << 2;
  f << 4;
  const double scalar = compose_guidance(u, i, g, f, GuidanceWeights{}, true)[0];
  const double secs = seconds_since(start);
  report(3, worst <= 1e-12 && scalar == 9.5 && secs < 1.0,
         "max deviation " + fmt("%.2e", worst) + ", scalar example " + fmt("%.4f", scalar) + ", " +
             fmt("%.2f", secs) + " s");
}

// 4. Reverse-mode gradients against central differences.
void gradient_check() {
  const auto start = Clock::now();
  const NoiseSchedule sched = make_schedule(1000, 1e-4, 0.02);
  ModelConfig mc;
  mc.grid = 4;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    DenoiserParams<double> params = init_params<double>(mc, rng);
    params.b1.setRandom();
    params.b2.setRandom();
    params.b3.setRandom();
    std::vector<ToyScene> scenes;
    std::vector<Condition> conds;
    std::vector<Mask> truths;
    for (int n = 0; n < 6; ++n) {
      SceneObject o{ShapeClass(n % 3), ColorClass((n + int(seed)) % 3), 1 + n % 2, 1 + (n / 2) % 2, 1, 0};
      scenes.push_back(ToyScene::from_objects(4, {o}));
      Condition c;
      c.shape = o.shape;
      c.color = o.color;
      conds.push_back(c);
      truths.push_back(scenes.back().masks[0]);
    }
    std::vector<TrainItem> items;
    for (int n = 0; n < 6; ++n) items.push_back({&scenes[n], &conds[n], &truths[n]});
    TrainConfig cfg;
    cfg.target_kind = seed % 2 ? TargetKind::x0 : TargetKind::eps;
    cfg.strategy = TimestepStrategy::loss_scaling(schedule_profile(sched, 10));
    const auto batch = prepare_batch<double>(mc, items, cfg, sched, rng);
    DenoiserParams<double> grads;
    loss_and_gradient<double>(params, batch, &grads);
    const Eigen::VectorXd g = grads.flatten();
    Eigen::VectorXd flat = params.flatten();
    std::uniform_int_distribution<Eigen::Index> pick(0, flat.size() - 1);
    for (int probe = 0; probe < 300; ++probe) {
      const Eigen::Index k = pick(rng);
      const double keep = flat[k], h = 1e-4;
      flat[k] = keep + h;
      params.assign(flat);
      const double up = loss_and_gradient<double>(params, batch, nullptr);
      flat[k] = keep - h;
      params.assign(flat);
      const double down = loss_and_gradient<double>(params, batch, nullptr);
      flat[k] = keep;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(numeric - g[k]) / std::max({std::abs(numeric), std::abs(g[k]), 1e-7}));
    }
    params.assign(flat);
  }
  const double secs = seconds_since(start);
  report(4, worst <= 1e-4 && secs < 30.0,
         "max relative error " + fmt("%.2e", worst) + " over 5 batches x 300 coordinates, " +
             fmt("%.1f", secs) + " s");
}

struct CellRun {
  EvalReport eval;
  TrainedModel model;
  ExperimentConfig config;
  std::optional<ContributionProfile> profile;
  double train_seconds = 0.0;
};

CellRun train_cell(const std::string& name, ExperimentConfig cfg, std::uint64_t seed,
                   const TrainedModel* stats_source) {
  cfg.train.seed = seed;
  CellRun out;
  if (stats_source) {
    const StatsEstimate est = estimate_profile(*stats_source, cfg, cfg.eval.trace_steps.front());
    cfg = with_stats_profile(cfg, est.profile);
    out.profile = est.profile;
  }
  const auto start = Clock::now();
  RunOptions opt;
  opt.evaluate = true;
  RunResult r = run_experiment(cfg, opt);
  out.train_seconds = seconds_since(start);
  if (r.record.status != "complete") throw std::runtime_error(name + " failed: " + r.error);
  out.eval = *r.eval;
  out.model = std::move(r.model);
  out.config = cfg;
  std::printf("  %-10s seed %llu  oIoU %.4f  peak %.4f  drop %.4f  curve %s  (%.0f s)\n", name.c_str(),
              (unsigned long long)seed, out.eval.final_oiou, out.eval.best_oiou, out.eval.late_drop(),
              join(out.eval.checkpoint_oiou).c_str(), out.train_seconds);
  std::fflush(stdout);
  record["runs"][name + "-s" + std::to_string(seed)] = {{"eval", out.eval.to_json()},
                                                        {"seconds", out.train_seconds}};
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> overrides(argv + 1, argv + argc);
  const auto start = Clock::now();

  scheduler_identities();
  stats_oracle();
  guidance_degeneracies();
  gradient_check();

  const ExperimentConfig base = apply_overrides(ExperimentConfig{}, overrides);
  ExperimentConfig aug_half = apply_overrides(base, {"augment.enabled=true", "augment.intensity_multiplier=0.5"});
  ExperimentConfig aug_full = apply_overrides(base, {"augment.enabled=true", "augment.intensity_multiplier=1.0"});
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  std::printf("training uniform, prob_scaling (stats), and augmented cells for seeds 0 1 2 (config %s)\n",
              config_hash(base).c_str());

  std::map<std::string, std::vector<CellRun>> cells;
  std::vector<double> max_weights, baseline_seconds;
  std::vector<std::vector<double>> step_profiles;
  for (std::uint64_t seed : seeds) {
    CellRun uni = train_cell("uniform", base, seed, nullptr);
    baseline_seconds.push_back(uni.train_seconds);
    CellRun prob = train_cell("prob", base, seed, &uni.model);
    max_weights.push_back(prob.profile->weights.maxCoeff());
    std::printf("  stats profile (increasing t) seed %llu: %s\n", (unsigned long long)seed,
                join(std::vector<double>(prob.profile->weights.data(), prob.profile->weights.data() + 10)).c_str());
    cells["aug0.5"].push_back(train_cell("aug0.5", aug_half, seed, &uni.model));
    cells["aug1"].push_back(train_cell("aug1", aug_full, seed, &uni.model));
    cells["uniform"].push_back(std::move(uni));
    cells["prob"].push_back(std::move(prob));
  }

  auto finals = [&](const std::string& name) {
    std::vector<double> v;
    for (const auto& c : cells[name]) v.push_back(c.eval.final_oiou);
    return v;
  };

  // 5. Non-uniform statistics profile on the uniform baseline.
  {
    bool pass = true;
    for (double w : max_weights) pass = pass && w >= 3.0 / 10.0;
    const double slowest = *std::max_element(baseline_seconds.begin(), baseline_seconds.end());
    report(5, pass && slowest <= 600.0,
           "largest group weight per seed " + join(max_weights) + " (need >= 0.3 on each; mean " +
               fmt("%.4f", mean(max_weights)) + "), baseline train+eval <= " +
               fmt("%.0f", slowest) + " s");
  }

  // 6. prob_scaling with the statistics profile beats uniform.
  {
    const double u = mean(finals("uniform")), p = mean(finals("prob"));
    report(6, p - u >= 0.02,
           "mean oIoU uniform " + fmt("%.4f", u) + " " + join(finals("uniform")) + ", prob_scaling " +
               fmt("%.4f", p) + " " + join(finals("prob")) + ", gain " + fmt("%+.2f", 100 * (p - u)) +
               " points (need >= +2)");
  }

  // 7. Augmentation gain and a smaller late-trajectory drop, per seed.
  {
    const double s = mean(finals("prob")), a = mean(finals("aug1"));
    bool drops = true;
    std::vector<double> d_plain, d_aug;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      d_plain.push_back(cells["prob"][i].eval.late_drop());
      d_aug.push_back(cells["aug1"][i].eval.late_drop());
      drops = drops && d_aug.back() < d_plain.back();
    }
    report(7, a > s && drops,
           "mean oIoU sampling-only " + fmt("%.4f", s) + ", full " + fmt("%.4f", a) + "; late drop without " +
               join(d_plain) + " with " + join(d_aug));
  }

  // 8. Intensity multipliers 0, 0.5, 1. Multiplier 0 leaves every target
  // untouched and consumes no randomness, so it trains exactly the
  // sampling-only cell.
  {
    const double m0 = mean(finals("prob")), m5 = mean(finals("aug0.5")), m1 = mean(finals("aug1"));
    report(8, m0 <= m5 && m5 <= m1,
           "mean oIoU at 0x " + fmt("%.4f", m0) + ", 0.5x " + fmt("%.4f", m5) + ", 1x " + fmt("%.4f", m1));
  }

  // 9. Correction workflow on the hard split.
  {
    std::vector<double> plain, corrected;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const CellRun& run = cells["aug1"][i];
      const ExperimentConfig& cfg = run.config;
      const NoiseSchedule schedule = cfg.schedule.build();
      const Dataset hard = make_split(cfg, Split::hard);
      SamplerOptions opt = build_sampler_options(cfg, schedule);
      opt.checkpoint_ts.clear();
      plain.push_back(evaluate(run.model, hard, schedule, opt, cfg.guidance, cfg.eval.seed).final_oiou);
      std::vector<WorkflowItem> items;
      for (std::size_t n = 0; n < hard.items.size(); ++n) {
        const Example& ex = hard.items[n];
        items.push_back({&ex.scene, ex.condition, &ex.truth, derive_seed(cfg.eval.seed, n)});
      }
      const auto results = run_correction_workflows(run.model, items, cfg.workflow.k, cfg.guidance, schedule, opt);
      std::vector<Mask> pred, truth;
      for (std::size_t n = 0; n < results.size(); ++n) {
        pred.push_back(results[n].mask);
        truth.push_back(hard.items[n].truth);
      }
      corrected.push_back(oiou(pred, truth));
    }
    report(9, mean(corrected) >= mean(plain),
           "hard split oIoU plain " + fmt("%.4f", mean(plain)) + " " + join(plain) + ", workflow " +
               fmt("%.4f", mean(corrected)) + " " + join(corrected));
  }

  // 10. Profiles from 25-, 50- and 100-step trajectories of one checkpoint.
  {
    const CellRun& run = cells["uniform"][0];
    std::vector<Eigen::VectorXd> profiles;
    for (int steps : {25, 50, 100}) {
      profiles.push_back(estimate_profile(run.model, run.config, steps).profile.weights);
      std::printf("  %3d-step profile: %s\n", steps,
                  join(std::vector<double>(profiles.back().data(), profiles.back().data() + 10)).c_str());
    }
    const std::vector<double> rho{spearman(profiles[0], profiles[1]), spearman(profiles[0], profiles[2]),
                                  spearman(profiles[1], profiles[2])};
    report(10, *std::min_element(rho.begin(), rho.end()) >= 0.8,
           "pairwise Spearman (25-50, 25-100, 50-100) " + join(rho, "%.3f") + " (need >= 0.8)");
  }

  // 11. Intermediate-step evaluation report.
  {
    bool pass = true;
    std::string detail;
    for (const auto& [name, runs] : cells) {
      for (const auto& r : runs) {
        const auto j = r.eval.to_json();
        pass = pass && j["checkpoints"].size() == 6 && r.eval.best_oiou >= r.eval.final_oiou &&
               r.eval.argmax_index >= 0;
      }
    }
    const EvalReport& e = cells["uniform"][0].eval;
    detail = "6 checkpoints per report; uniform seed 0 argmax t=" + std::to_string(e.argmax_t) + " oIoU " +
             fmt("%.4f", e.best_oiou) + " vs final " + fmt("%.4f", e.final_oiou);
    report(11, pass, detail);
  }

  std::ofstream("acceptance_report.json") << record.dump(2) << '\n';
  std::printf("acceptance finished in %.0f s, %d criteria failed\n", seconds_since(start), failures);
  return failures == 0 ? 0 : 1;
}
