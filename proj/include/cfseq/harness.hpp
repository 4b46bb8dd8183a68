#pragma once
// Experiment orchestration: counterfactual evaluation of the sequence model
// and the MSM baseline, seeded end-to-end runs with persisted artifacts, the
// ablation grid and the subnetwork importance study.
//
// Every run is fully determined by (spec, seed): the seed picks both the
// simulated dataset and the parameter initialization. Runs own an output
// subdirectory and are idempotent; a completed run is loaded back from disk
// instead of recomputed. Evaluation follows the rolling-origin protocol and
// scores counterfactual outcomes only, after the origin.

#include <chrono>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfseq/io.hpp"
#include "cfseq/metrics.hpp"
#include "cfseq/model.hpp"
#include "cfseq/msm.hpp"
#include "cfseq/sim.hpp"
#include "cfseq/train.hpp"

namespace cfseq {

// ---------------------------------------------------------------------------
// Counterfactual evaluation, sequence model

// One-step predictions for every entry of the one-step counterfactual set,
// in set order, in raw volume units. A single full-length forward pass per
// chunk of patients yields the representation at every origin at once (the
// row at the origin sees exactly the history through the origin); only the
// outcome head reruns per treatment combo.
inline std::vector<double> ct_one_step_predictions(const ModelParams& params,
                                                   const ModelConfig& cfg, const Scaler& scaler,
                                                   const std::vector<Trajectory>& test_raw,
                                                   const std::vector<CfTrajectory>& cf,
                                                   long chunk = 64) {
  auto scaled = scale_trajectories(test_raw, scaler);
  long n = static_cast<long>(scaled.size());
  long origins = cfg.t_len - 1;
  // pred[(patient*origins + origin)*d_a + combo]
  std::vector<double> pred(static_cast<size_t>(n) * origins * cfg.d_a);

  for (long at = 0; at < n; at += chunk) {
    long hi = std::min(n, at + chunk);
    std::vector<const Trajectory*> ptrs;
    for (long i = at; i < hi; ++i) ptrs.push_back(&scaled[i]);
    std::vector<long> cov(ptrs.size(), cfg.t_len);
    auto in = make_input(cfg, ptrs, cfg.t_len, cov, /*with_targets=*/false);
    Tape tape;
    tape.recording = false;
    auto fwd = model_forward(tape, params, cfg, in, /*training=*/false);

    std::vector<long> rows;
    rows.reserve(ptrs.size() * origins);
    for (size_t s = 0; s < ptrs.size(); ++s)
      for (long o = 0; o < origins; ++o) rows.push_back(in.row(static_cast<long>(s), o));
    auto phi_sel = gather_rows(tape, fwd.phi, rows);

    for (long combo = 0; combo < cfg.d_a; ++combo) {
      auto onehot = tensor(static_cast<long>(rows.size()), cfg.d_a);
      for (size_t r = 0; r < rows.size(); ++r) onehot->at(static_cast<long>(r), combo) = 1.0;
      auto y_hat = predict_outcome(tape, params.outcome, phi_sel, onehot);
      for (size_t s = 0; s < ptrs.size(); ++s)
        for (long o = 0; o < origins; ++o) {
          double raw = unscale_y(y_hat->at(static_cast<long>(s) * origins + o, 0), scaler);
          pred[(static_cast<size_t>(at + s) * origins + o) * cfg.d_a + combo] = raw;
        }
    }
  }

  std::vector<double> out;
  out.reserve(cf.size());
  for (const auto& c : cf) {
    if (c.plan.size() != 1)
      throw std::invalid_argument("ct_one_step_predictions: plan length must be 1");
    if (c.patient < 0 || c.patient >= n || c.origin < 0 || c.origin >= origins)
      throw std::invalid_argument("ct_one_step_predictions: entry out of range");
    out.push_back(pred[(static_cast<size_t>(c.patient) * origins + c.origin) * cfg.d_a +
                       c.plan[0]]);
  }
  return out;
}

// Multi-step predictions for every entry of the tau-step set, in set order:
// autoregressive rollout under each plan, predictions in raw volume units,
// one value per horizon 1..tau_max.
inline std::vector<std::vector<double>> ct_tau_step_predictions(
    const ModelParams& params, const ModelConfig& cfg, const Scaler& scaler,
    const std::vector<Trajectory>& test_raw, const std::vector<CfTrajectory>& cf, long tau_max,
    long chunk = 128) {
  auto scaled = scale_trajectories(test_raw, scaler);
  std::vector<std::vector<double>> out(cf.size());

  std::map<long, std::vector<size_t>> by_origin;
  for (size_t i = 0; i < cf.size(); ++i) {
    if (static_cast<long>(cf[i].plan.size()) != tau_max)
      throw std::invalid_argument("ct_tau_step_predictions: plan length must equal tau_max");
    by_origin[cf[i].origin].push_back(i);
  }

  for (const auto& [origin, idxs] : by_origin) {
    for (size_t at = 0; at < idxs.size(); at += chunk) {
      size_t hi = std::min(idxs.size(), at + chunk);
      std::vector<RolloutPlan> plans;
      plans.reserve(hi - at);
      for (size_t k = at; k < hi; ++k) {
        const auto& c = cf[idxs[k]];
        plans.push_back({&scaled[c.patient], c.plan});
      }
      auto preds = rollout(params, cfg, plans, origin, tau_max);
      for (size_t k = at; k < hi; ++k) {
        auto& dst = out[idxs[k]];
        dst.resize(tau_max);
        for (long h = 0; h < tau_max; ++h) dst[h] = unscale_y(preds[k - at][h], scaler);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Counterfactual evaluation, MSM baseline

inline std::vector<double> msm_one_step_predictions(const MsmModel& m,
                                                    const std::vector<Trajectory>& test_raw,
                                                    const std::vector<CfTrajectory>& cf) {
  std::vector<double> out;
  out.reserve(cf.size());
  for (const auto& c : cf) {
    if (c.plan.size() != 1)
      throw std::invalid_argument("msm_one_step_predictions: plan length must be 1");
    out.push_back(msm_predict(m, test_raw[c.patient], c.origin, c.plan)[0]);
  }
  return out;
}

inline std::vector<std::vector<double>> msm_tau_step_predictions(
    const MsmModel& m, const std::vector<Trajectory>& test_raw,
    const std::vector<CfTrajectory>& cf) {
  std::vector<std::vector<double>> out;
  out.reserve(cf.size());
  for (const auto& c : cf) out.push_back(msm_predict(m, test_raw[c.patient], c.origin, c.plan));
  return out;
}

// ---------------------------------------------------------------------------
// Per-horizon scores

// nrmse[tau] for tau = 1..tau_max from aligned tau-step predictions; entry
// [0] is filled from the one-step pair when given.
inline std::vector<MetricsRecord> horizon_records(
    const std::string& method, double gamma, uint64_t seed, double v_max,
    const std::vector<double>& one_preds, const std::vector<CfTrajectory>& one_cf,
    const std::vector<std::vector<double>>& tau_preds, const std::vector<CfTrajectory>& tau_cf,
    long tau_max, double wall_seconds) {
  if (one_preds.size() != one_cf.size() || tau_preds.size() != tau_cf.size())
    throw std::invalid_argument("horizon_records: prediction/truth size mismatch");
  std::vector<MetricsRecord> recs;
  {
    ErrorAccum acc;
    for (size_t i = 0; i < one_cf.size(); ++i) acc.add(one_preds[i], one_cf[i].y[0]);
    recs.push_back({method, gamma, 1, seed, acc.rmse() / v_max, wall_seconds});
  }
  for (long tau = 2; tau <= tau_max; ++tau) {
    ErrorAccum acc;
    for (size_t i = 0; i < tau_cf.size(); ++i)
      acc.add(tau_preds[i][tau - 1], tau_cf[i].y[tau - 1]);
    recs.push_back({method, gamma, tau, seed, acc.rmse() / v_max, wall_seconds});
  }
  return recs;
}

// ---------------------------------------------------------------------------
// Treatment probe on the frozen representation

// Fits a fresh multinomial logistic probe predicting the current treatment
// from the frozen representation (fit on one split, scored on another) and
// returns the scoring accuracy. Balanced representations make this harder,
// pushing accuracy toward chance.
inline double linear_probe_accuracy(const ModelParams& params, const ModelConfig& cfg,
                                    const Scaler& scaler, const std::vector<Trajectory>& fit_raw,
                                    const std::vector<Trajectory>& score_raw, double ridge = 1e-6,
                                    long chunk = 64) {
  auto features = [&](const std::vector<Trajectory>& raw, std::vector<double>& x,
                      std::vector<long>& labels) {
    auto scaled = scale_trajectories(raw, scaler);
    long n = static_cast<long>(scaled.size());
    for (long at = 0; at < n; at += chunk) {
      long hi = std::min(n, at + chunk);
      std::vector<const Trajectory*> ptrs;
      for (long i = at; i < hi; ++i) ptrs.push_back(&scaled[i]);
      std::vector<long> cov(ptrs.size(), cfg.t_len);
      auto in = make_input(cfg, ptrs, cfg.t_len, cov);
      Tape tape;
      tape.recording = false;
      auto fwd = model_forward(tape, params, cfg, in, /*training=*/false);
      auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
      for (long r = 0; r < phi_sel->rows(); ++r) {
        x.push_back(1.0);  // intercept
        for (long j = 0; j < cfg.d_r; ++j) x.push_back(phi_sel->at(r, j));
        labels.push_back(in.labels[r]);
      }
    }
  };

  std::vector<double> x_fit, x_score;
  std::vector<long> y_fit, y_score;
  features(fit_raw, x_fit, y_fit);
  features(score_raw, x_score, y_score);

  long d = 1 + cfg.d_r;
  auto fit = fit_softmax(x_fit, y_fit, static_cast<long>(y_fit.size()), d, cfg.d_a, ridge);

  long hits = 0;
  std::vector<double> probs(cfg.d_a);
  for (size_t r = 0; r < y_score.size(); ++r) {
    softmax_probs(fit.w, x_score.data() + r * d, d, cfg.d_a, probs.data());
    long best = 0;
    for (long c = 1; c < cfg.d_a; ++c)
      if (probs[c] > probs[best]) best = c;
    if (best == y_score[r]) ++hits;
  }
  if (y_score.empty()) throw std::invalid_argument("linear_probe_accuracy: empty scoring set");
  return static_cast<double>(hits) / static_cast<double>(y_score.size());
}

// ---------------------------------------------------------------------------
// Seeded end-to-end runs

struct ExperimentSpec {
  std::string label = "ct";  // method label on metrics rows and run directory
  SimConfig sim;
  ModelConfig model;
  TrainConfig train;
  MsmConfig msm;
  std::vector<uint64_t> seeds = {11, 23, 37};
  std::string out_dir;
  bool with_ct = true;
  bool with_msm = true;
};

// Reconciles the dimensions that must agree across the spec's parts.
inline void align_spec(ExperimentSpec& spec) {
  spec.model.d_x = 2;
  spec.model.d_a = 4;
  spec.model.d_y = 1;
  spec.model.d_v = 1;
  spec.model.t_len = spec.sim.t_len;
  spec.msm.tau_max = spec.sim.tau_max;
  spec.sim.validate();
  spec.model.validate();
  spec.msm.validate();
}

inline std::string run_dir(const ExperimentSpec& spec, uint64_t seed) {
  return spec.out_dir + "/" + spec.label + "/seed_" + std::to_string(seed);
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Runs one (spec, seed) pipeline: simulate, train, evaluate, persist. If the
// run directory already holds a completed manifest the stored metrics are
// returned untouched. On a stage failure the manifest records the stage tag
// and the error; rows produced by earlier stages stay on disk.
inline std::vector<MetricsRecord> run_one(const ExperimentSpec& spec, uint64_t seed) {
  std::string dir = run_dir(spec, seed);
  std::string manifest_path = dir + "/manifest.json";
  std::string metrics_path = dir + "/metrics.tsv";

  if (std::filesystem::exists(manifest_path)) {
    json m = read_json(manifest_path);
    if (m.value("stage", "") == "complete") return read_metrics_tsv(metrics_path);
  }
  ensure_dir(dir);
  std::filesystem::remove(metrics_path);

  json manifest{{"label", spec.label},
                {"seed", seed},
                {"gamma", spec.sim.gamma},
                {"sim", sim_config_to_json(spec.sim)},
                {"model", model_config_to_json(spec.model)},
                {"train", train_config_to_json(spec.train)},
                {"msm", msm_config_to_json(spec.msm)},
                {"with_ct", spec.with_ct},
                {"with_msm", spec.with_msm},
                {"wall", json::object()}};
  manifest["sim"]["seed"] = seed;

  std::vector<MetricsRecord> recs;
  std::string stage = "simulate";
  try {
    SimConfig sim_cfg = spec.sim;
    sim_cfg.seed = seed;
    Dataset ds = simulate_dataset(sim_cfg);
    double v_max = sim_cfg.v_max;

    if (spec.with_ct) {
      stage = "train";
      auto t0 = std::chrono::steady_clock::now();
      TrainConfig tcfg = spec.train;
      tcfg.seed = seed;
      Scaler scaler = fit_scaler(ds.train.trajs, spec.model.d_x, spec.model.d_y, spec.model.d_v);
      auto train_scaled = scale_trajectories(ds.train.trajs, scaler);
      auto val_scaled = scale_trajectories(ds.val.trajs, scaler);
      TrainState st = init_train(spec.model, tcfg);
      std::string log_path = dir + "/epochs.jsonl";
      std::filesystem::remove(log_path);
      train(st, spec.model, tcfg, train_scaled, val_scaled, scaler,
            [&](const EpochRecord& e) { append_jsonl(log_path, epoch_to_json(e)); });
      manifest["wall"]["train"] = detail::seconds_since(t0);

      stage = "checkpoint";
      save_checkpoint(dir + "/model_ema.ckpt", st.ema, spec.model, scaler,
                      json{{"params", "ema"}, {"seed", seed}});
      save_checkpoint(dir + "/model_live.ckpt", st.live, spec.model, scaler,
                      json{{"params", "live"}, {"seed", seed}});

      stage = "evaluate_ct";
      auto te = std::chrono::steady_clock::now();
      auto one = ct_one_step_predictions(st.ema, spec.model, scaler, ds.test.trajs,
                                         ds.cf_one_step);
      auto multi = ct_tau_step_predictions(st.ema, spec.model, scaler, ds.test.trajs,
                                           ds.cf_tau_step, sim_cfg.tau_max);
      manifest["wall"]["evaluate_ct"] = detail::seconds_since(te);
      double wall = detail::seconds_since(t0);
      auto ct_recs = horizon_records(spec.label, sim_cfg.gamma, seed, v_max, one,
                                     ds.cf_one_step, multi, ds.cf_tau_step, sim_cfg.tau_max,
                                     wall);
      append_metrics_tsv(metrics_path, ct_recs);
      recs.insert(recs.end(), ct_recs.begin(), ct_recs.end());
    }

    if (spec.with_msm) {
      stage = "fit_msm";
      auto t0 = std::chrono::steady_clock::now();
      std::vector<Trajectory> fit_set = ds.train.trajs;
      fit_set.insert(fit_set.end(), ds.val.trajs.begin(), ds.val.trajs.end());
      MsmModel msm = fit_msm(spec.msm, fit_set);
      write_msm_summary(dir + "/msm_summary.txt", msm);

      stage = "evaluate_msm";
      auto one = msm_one_step_predictions(msm, ds.test.trajs, ds.cf_one_step);
      auto multi = msm_tau_step_predictions(msm, ds.test.trajs, ds.cf_tau_step);
      double wall = detail::seconds_since(t0);
      manifest["wall"]["msm"] = wall;
      auto msm_recs = horizon_records("msm", sim_cfg.gamma, seed, v_max, one, ds.cf_one_step,
                                      multi, ds.cf_tau_step, sim_cfg.tau_max, wall);
      append_metrics_tsv(metrics_path, msm_recs);
      recs.insert(recs.end(), msm_recs.begin(), msm_recs.end());
    }
  } catch (const std::exception& e) {
    manifest["stage"] = "failed";
    manifest["failed_stage"] = stage;
    manifest["error"] = e.what();
    write_json(manifest_path, manifest);
    throw;
  }

  manifest["stage"] = "complete";
  write_json(manifest_path, manifest);
  return recs;
}

inline std::vector<MetricsRecord> run_experiment(const ExperimentSpec& spec) {
  if (spec.out_dir.empty()) throw std::invalid_argument("run_experiment: out_dir required");
  if (spec.seeds.empty()) throw std::invalid_argument("run_experiment: at least one seed");
  ExperimentSpec aligned = spec;
  align_spec(aligned);
  std::vector<MetricsRecord> all;
  for (uint64_t seed : aligned.seeds) {
    auto recs = run_one(aligned, seed);
    all.insert(all.end(), recs.begin(), recs.end());
  }
  // Derived convenience table for this label; the per-run files under the
  // seed directories are the durable records.
  write_metrics_tsv(aligned.out_dir + "/" + aligned.label + "/metrics.tsv", all);
  return all;
}

// Re-derives a completed run's sequence-model metrics from its checkpoint
// and manifest alone; the invariant test compares these to the stored rows.
inline std::vector<MetricsRecord> rederive_ct_metrics(const std::string& dir) {
  json manifest = read_json(dir + "/manifest.json");
  SimConfig sim_cfg = sim_config_from_json(manifest.at("sim"));
  Dataset ds = simulate_dataset(sim_cfg);
  Checkpoint ck = load_checkpoint(dir + "/model_ema.ckpt");
  uint64_t seed = manifest.at("seed").get<uint64_t>();
  auto one =
      ct_one_step_predictions(ck.params, ck.config, ck.scaler, ds.test.trajs, ds.cf_one_step);
  auto multi = ct_tau_step_predictions(ck.params, ck.config, ck.scaler, ds.test.trajs,
                                       ds.cf_tau_step, sim_cfg.tau_max);
  return horizon_records(manifest.at("label").get<std::string>(), sim_cfg.gamma, seed,
                         sim_cfg.v_max, one, ds.cf_one_step, multi, ds.cf_tau_step,
                         sim_cfg.tau_max, 0.0);
}

// ---------------------------------------------------------------------------
// Ablation grid

// Named variants of a base spec, mirroring the usual ablation table: each
// changes exactly one ingredient of the training recipe or architecture.
inline std::vector<ExperimentSpec> ablation_specs(const ExperimentSpec& base) {
  std::vector<ExperimentSpec> specs;
  auto push = [&](const std::string& label, auto&& mutate) {
    ExperimentSpec s = base;
    s.label = label;
    s.with_msm = false;
    mutate(s);
    specs.push_back(std::move(s));
  };
  push("alpha0", [](ExperimentSpec& s) { s.train.alpha = 0.0; });
  push("grad_reverse",
       [](ExperimentSpec& s) { s.train.balancing = Balancing::GradReverse; });
  push("beta0", [](ExperimentSpec& s) { s.train.ema_beta = 0.0; });
  push("abs_pe", [](ExperimentSpec& s) { s.model.pe_mode = PeMode::Absolute; });
  push("fixed_pe", [](ExperimentSpec& s) { s.model.pe_mode = PeMode::RelativeFixed; });
  push("no_attn_dropout", [](ExperimentSpec& s) { s.model.attn_dropout = false; });
  push("no_cross",
       [](ExperimentSpec& s) { s.model.cross_attention = {false, false, false}; });
  return specs;
}

// ---------------------------------------------------------------------------
// Subnetwork importance

struct ImportanceRow {
  Stream stream = Stream::Treatment;
  long tau = 0;
  double mean = 0.0;  // RMSE(isolated) - RMSE(full), averaged over seeds
  double se = 0.0;
};

// Trains the three isolated variants (cross-attention removed from one
// stream at a time) against the full model and reports the per-horizon
// RMSE difference with standard errors over seeds.
inline std::vector<ImportanceRow> subnetwork_importance(const ExperimentSpec& base) {
  ExperimentSpec full = base;
  full.with_msm = false;
  auto full_recs = run_experiment(full);

  auto by_key = [](const std::vector<MetricsRecord>& recs) {
    std::map<std::pair<long, uint64_t>, double> m;
    for (const auto& r : recs) m[{r.tau, r.seed}] = r.nrmse;
    return m;
  };
  auto full_map = by_key(full_recs);

  std::vector<ImportanceRow> rows;
  for (Stream s : {Stream::Treatment, Stream::Covariate, Stream::Outcome}) {
    ExperimentSpec iso = full;
    iso.label = base.label + "_iso_" + stream_name(s);
    iso.model = isolate_stream(iso.model, s);
    auto iso_map = by_key(run_experiment(iso));

    for (long tau = 1; tau <= base.sim.tau_max; ++tau) {
      std::vector<double> diffs;
      for (uint64_t seed : base.seeds) {
        auto fi = full_map.find({tau, seed});
        auto ii = iso_map.find({tau, seed});
        if (fi == full_map.end() || ii == iso_map.end())
          throw std::runtime_error("subnetwork_importance: missing record");
        diffs.push_back(ii->second - fi->second);
      }
      auto ms = mean_and_se(diffs);
      rows.push_back({s, tau, ms.mean, ms.se});
    }
  }

  std::ofstream out(base.out_dir + "/importance.tsv");
  if (!out) throw std::runtime_error("subnetwork_importance: cannot write importance.tsv");
  out << "stream\ttau\tmean\tse\n";
  for (const auto& r : rows)
    out << stream_name(r.stream) << "\t" << r.tau << "\t" << r.mean << "\t" << r.se << "\n";
  return rows;
}

}  // namespace cfseq
