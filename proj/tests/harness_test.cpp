#include "cfseq/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace cfseq;

namespace {

SimConfig tiny_sim() {
  SimConfig s;
  s.n_train = 24;
  s.n_val = 8;
  s.n_test = 5;
  s.t_len = 8;
  s.gamma = 1.0;
  s.tau_max = 3;
  s.seed = 7;
  return s;
}

ModelConfig tiny_model(long t_len) {
  ModelConfig m;
  m.t_len = t_len;
  m.n_blocks = 1;
  m.d_h = 8;
  m.n_h = 2;
  m.d_r = 8;
  m.n_fc = 8;
  m.l_max = 4;
  return m;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::path("harness_test_work") / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

long count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  long n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

// The chunked full-length forward used for one-step evaluation must agree
// bitwise with the autoregressive rollout entered at each origin: both see
// the same history and the same intervention.
TEST(CtEval, OneStepMatchesPerOriginRollout) {
  auto sim_cfg = tiny_sim();
  auto ds = simulate_dataset(sim_cfg);
  auto mcfg = tiny_model(sim_cfg.t_len);
  auto params = init_params(mcfg, 99);  // untrained weights exercise the path fine
  auto scaler = fit_scaler(ds.train.trajs, mcfg.d_x, mcfg.d_y, mcfg.d_v);

  auto preds = ct_one_step_predictions(params, mcfg, scaler, ds.test.trajs, ds.cf_one_step);
  ASSERT_EQ(preds.size(), ds.cf_one_step.size());

  auto scaled = scale_trajectories(ds.test.trajs, scaler);
  for (size_t i = 0; i < ds.cf_one_step.size(); i += 7) {
    const auto& c = ds.cf_one_step[i];
    std::vector<RolloutPlan> plan = {{&scaled[c.patient], c.plan}};
    double oracle = unscale_y(rollout(params, mcfg, plan, c.origin, 1)[0][0], scaler);
    EXPECT_EQ(preds[i], oracle) << "entry " << i;
  }
}

TEST(CtEval, TauStepShapesAndHorizonRecords) {
  auto sim_cfg = tiny_sim();
  auto ds = simulate_dataset(sim_cfg);
  auto mcfg = tiny_model(sim_cfg.t_len);
  auto params = init_params(mcfg, 42);
  auto scaler = fit_scaler(ds.train.trajs, mcfg.d_x, mcfg.d_y, mcfg.d_v);

  auto one = ct_one_step_predictions(params, mcfg, scaler, ds.test.trajs, ds.cf_one_step);
  auto multi = ct_tau_step_predictions(params, mcfg, scaler, ds.test.trajs, ds.cf_tau_step,
                                       sim_cfg.tau_max);
  ASSERT_EQ(multi.size(), ds.cf_tau_step.size());
  for (const auto& p : multi) EXPECT_EQ(p.size(), static_cast<size_t>(sim_cfg.tau_max));

  auto recs = horizon_records("ct", sim_cfg.gamma, 7, sim_cfg.v_max, one, ds.cf_one_step,
                              multi, ds.cf_tau_step, sim_cfg.tau_max, 1.5);
  ASSERT_EQ(recs.size(), static_cast<size_t>(sim_cfg.tau_max));
  for (long tau = 1; tau <= sim_cfg.tau_max; ++tau) {
    EXPECT_EQ(recs[tau - 1].tau, tau);
    EXPECT_GE(recs[tau - 1].nrmse, 0.0);
    EXPECT_EQ(recs[tau - 1].wall_seconds, 1.5);
    EXPECT_EQ(recs[tau - 1].method, "ct");
  }

  // Plan length must match the requested horizon.
  EXPECT_THROW(
      ct_tau_step_predictions(params, mcfg, scaler, ds.test.trajs, ds.cf_one_step, 3),
      std::invalid_argument);
}

TEST(Probe, DeterministicAndNearChanceOnRandomizedData) {
  auto sim_cfg = tiny_sim();
  sim_cfg.gamma = 0.0;
  sim_cfg.n_val = 16;
  sim_cfg.n_test = 16;
  auto ds = simulate_dataset(sim_cfg);
  auto mcfg = tiny_model(sim_cfg.t_len);
  auto params = init_params(mcfg, 3);
  auto scaler = fit_scaler(ds.train.trajs, mcfg.d_x, mcfg.d_y, mcfg.d_v);

  double acc = linear_probe_accuracy(params, mcfg, scaler, ds.val.trajs, ds.test.trajs);
  EXPECT_EQ(acc,
            linear_probe_accuracy(params, mcfg, scaler, ds.val.trajs, ds.test.trajs));
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  // Randomized treatments with two independent fair coins: each combo has
  // probability 1/4, so no probe can beat chance by much.
  EXPECT_LT(acc, 0.45);
  EXPECT_GT(acc, 0.10);
}

TEST(RunExperiment, PersistsSkipsAndRederives) {
  auto out = fresh_dir("run");
  ExperimentSpec spec;
  spec.label = "ct";
  spec.sim = tiny_sim();
  spec.model = tiny_model(spec.sim.t_len);
  spec.train.epochs = 2;
  spec.train.batch_size = 16;
  spec.seeds = {5};
  spec.out_dir = out.string();

  auto recs = run_experiment(spec);
  // tau_max rows for the model plus tau_max for the baseline.
  ASSERT_EQ(recs.size(), static_cast<size_t>(2 * spec.sim.tau_max));

  auto dir = std::filesystem::path(run_dir(spec, 5));
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.tsv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "model_ema.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "model_live.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "msm_summary.txt"));
  EXPECT_EQ(count_lines(dir / "epochs.jsonl"), spec.train.epochs);

  auto manifest = read_json((dir / "manifest.json").string());
  EXPECT_EQ(manifest.at("stage"), "complete");
  EXPECT_EQ(manifest.at("sim").at("seed"), 5);

  // Second invocation loads the stored rows instead of recomputing.
  auto again = run_experiment(spec);
  ASSERT_EQ(again.size(), recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(again[i].method, recs[i].method);
    EXPECT_EQ(again[i].tau, recs[i].tau);
    EXPECT_EQ(again[i].nrmse, recs[i].nrmse);
  }
  EXPECT_EQ(count_lines(dir / "epochs.jsonl"), spec.train.epochs);

  // Metrics are re-derivable from the checkpoint and the manifest alone.
  auto rederived = rederive_ct_metrics(dir.string());
  ASSERT_EQ(rederived.size(), static_cast<size_t>(spec.sim.tau_max));
  for (const auto& rd : rederived) {
    bool found = false;
    for (const auto& r : recs)
      if (r.method == rd.method && r.tau == rd.tau && r.seed == rd.seed) {
        EXPECT_NEAR(rd.nrmse, r.nrmse, 1e-12);
        found = true;
      }
    EXPECT_TRUE(found) << "tau " << rd.tau;
  }
}

TEST(RunExperiment, AblationGridCoversTheRecipe) {
  ExperimentSpec base;
  base.sim = tiny_sim();
  base.model = tiny_model(base.sim.t_len);
  base.out_dir = "unused";
  auto specs = ablation_specs(base);
  ASSERT_EQ(specs.size(), 7u);

  std::set<std::string> labels;
  for (const auto& s : specs) {
    labels.insert(s.label);
    EXPECT_FALSE(s.with_msm);
  }
  EXPECT_EQ(labels.size(), specs.size());

  auto find = [&](const std::string& label) -> const ExperimentSpec& {
    for (const auto& s : specs)
      if (s.label == label) return s;
    throw std::runtime_error("missing " + label);
  };
  EXPECT_EQ(find("alpha0").train.alpha, 0.0);
  EXPECT_EQ(find("grad_reverse").train.balancing, Balancing::GradReverse);
  EXPECT_EQ(find("beta0").train.ema_beta, 0.0);
  EXPECT_EQ(find("abs_pe").model.pe_mode, PeMode::Absolute);
  EXPECT_EQ(find("fixed_pe").model.pe_mode, PeMode::RelativeFixed);
  EXPECT_FALSE(find("no_attn_dropout").model.attn_dropout);
  auto& nc = find("no_cross").model.cross_attention;
  EXPECT_FALSE(nc[0] || nc[1] || nc[2]);
}

// With cross-attention already removed everywhere, isolating any stream
// leaves the configuration unchanged, so every importance score is exactly
// zero (the isolated run retrains but reproduces the baseline bitwise).
TEST(Importance, ZeroCrossConfigurationScoresExactlyZero) {
  auto out = fresh_dir("importance");
  ExperimentSpec spec;
  spec.label = "base";
  spec.sim = tiny_sim();
  spec.sim.n_train = 12;
  spec.sim.n_val = 4;
  spec.sim.n_test = 3;
  spec.model = tiny_model(spec.sim.t_len);
  spec.model.cross_attention = {false, false, false};
  spec.train.epochs = 1;
  spec.train.batch_size = 12;
  spec.seeds = {5};
  spec.out_dir = out.string();

  auto rows = subnetwork_importance(spec);
  ASSERT_EQ(rows.size(), static_cast<size_t>(3 * spec.sim.tau_max));
  for (const auto& r : rows) {
    EXPECT_EQ(r.mean, 0.0) << stream_name(r.stream) << " tau " << r.tau;
    EXPECT_EQ(r.se, 0.0);
  }
  EXPECT_TRUE(std::filesystem::exists(out / "importance.tsv"));
}
