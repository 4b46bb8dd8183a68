// Command-line surface for the counterfactual sequence workbench.
//
// Verbs:
//   simulate    write a dataset (trajectories + counterfactual sets) to disk
//   train       train the transformer for one seed, persist checkpoints
//   evaluate    full one-seed comparison: transformer vs the weighted baseline
//   ablate      run the ablation grid over a seed list
//   importance  per-stream importance via isolated retraining
//   verify      run the numbered acceptance criteria
//
// Every experiment verb takes an explicit seed (or seed list) and output
// directory; nothing is derived from wall clocks or machine state. A JSON
// config file can pre-fill any subset of the spec; command-line flags win
// over the file, the file wins over built-in defaults.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfseq/acceptance.hpp"

namespace {

using cfseq::json;

// Recursive overlay: objects merge key by key, everything else is replaced.
void deep_merge(json& base, const json& overlay) {
  if (!base.is_object() || !overlay.is_object()) {
    base = overlay;
    return;
  }
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (base.contains(it.key()))
      deep_merge(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

json spec_to_json(const cfseq::ExperimentSpec& s) {
  json j;
  j["label"] = s.label;
  j["seeds"] = s.seeds;
  j["with_ct"] = s.with_ct;
  j["with_msm"] = s.with_msm;
  j["sim"] = cfseq::sim_config_to_json(s.sim);
  j["model"] = cfseq::model_config_to_json(s.model);
  j["train"] = cfseq::train_config_to_json(s.train);
  j["msm"] = cfseq::msm_config_to_json(s.msm);
  return j;
}

cfseq::ExperimentSpec spec_from_json(const json& j) {
  cfseq::ExperimentSpec s;
  s.label = j.at("label").get<std::string>();
  s.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  s.with_ct = j.at("with_ct").get<bool>();
  s.with_msm = j.at("with_msm").get<bool>();
  s.sim = cfseq::sim_config_from_json(j.at("sim"));
  s.model = cfseq::model_config_from_json(j.at("model"));
  s.train = cfseq::train_config_from_json(j.at("train"));
  s.msm = cfseq::msm_config_from_json(j.at("msm"));
  return s;
}

// Flag storage. Options write here; only flags the user actually passed are
// copied onto the spec, so file and default values survive untouched.
struct Flags {
  std::string label;
  std::vector<uint64_t> seeds;
  uint64_t seed = 0;
  // simulation
  double gamma = 0.0;
  long n_train = 0, n_val = 0, n_test = 0, t_len = 0, tau_max = 0;
  std::string cf_scheme;
  // model
  long n_blocks = 0, d_h = 0, n_h = 0, d_r = 0, n_fc = 0, l_max = 0;
  double dropout = 0.0;
  std::string pe_mode;
  long attn_dropout = 0;
  std::vector<long> cross;
  // training
  std::string balancing;
  double alpha = 0.0, ema_beta = 0.0, lr = 0.0;
  long batch_size = 0, epochs = 0, augment = 0;
  // baseline
  double msm_outcome_ridge = 0.0, msm_propensity_ridge = 0.0;
};

struct SpecOptions {
  Flags f;
  std::map<std::string, CLI::Option*> opt;

  void add(CLI::App* cmd, bool multi_seed) {
    auto o = [&](const char* name, auto& var, const char* desc) {
      opt[name] = cmd->add_option(name, var, desc);
    };
    o("--label", f.label, "run label; names the output subdirectory");
    if (multi_seed)
      o("--seeds", f.seeds, "seed list, one independent run each");
    else
      cmd->add_option("--seed", f.seed, "run seed")->required();
    o("--gamma", f.gamma, "confounding strength of the assignment policy");
    o("--n-train", f.n_train, "training patients");
    o("--n-val", f.n_val, "validation patients");
    o("--n-test", f.n_test, "test patients");
    o("--t-len", f.t_len, "days per trajectory");
    o("--tau-max", f.tau_max, "longest projection horizon");
    opt["--cf-scheme"] = cmd->add_option("--cf-scheme", f.cf_scheme,
                                         "multi-step plan scheme: sliding or random")
                             ->check(CLI::IsMember({"sliding", "random"}));
    o("--n-blocks", f.n_blocks, "encoder blocks");
    o("--d-h", f.d_h, "hidden width (per stream)");
    o("--n-h", f.n_h, "attention heads");
    o("--d-r", f.d_r, "representation width");
    o("--n-fc", f.n_fc, "head hidden units");
    o("--dropout", f.dropout, "dropout rate");
    o("--l-max", f.l_max, "relative-position clip distance");
    opt["--pe-mode"] = cmd->add_option("--pe-mode", f.pe_mode,
                                       "positional encoding: trainable, fixed or absolute")
                           ->check(CLI::IsMember({"trainable", "fixed", "absolute"}));
    o("--attn-dropout", f.attn_dropout, "attentional dropout on/off (1/0)");
    opt["--cross-attention"] =
        cmd->add_option("--cross-attention", f.cross, "per-stream cross attention, three 0/1")
            ->expected(3);
    opt["--balancing"] = cmd->add_option("--balancing", f.balancing,
                                         "balancing scheme: none, confusion or gradreverse")
                             ->check(CLI::IsMember({"none", "confusion", "gradreverse"}));
    o("--alpha", f.alpha, "confusion loss weight after the rise");
    o("--ema-beta", f.ema_beta, "parameter averaging decay");
    o("--lr", f.lr, "learning rate");
    o("--batch-size", f.batch_size, "minibatch size");
    o("--epochs", f.epochs, "training epochs");
    o("--augment", f.augment, "covariate-cutoff augmentation on/off (1/0)");
    o("--msm-outcome-ridge", f.msm_outcome_ridge, "baseline outcome ridge");
    o("--msm-propensity-ridge", f.msm_propensity_ridge, "baseline propensity ridge");
  }

  bool passed(const char* name) const {
    auto it = opt.find(name);
    return it != opt.end() && it->second->count() > 0;
  }

  void apply(cfseq::ExperimentSpec& s) const {
    if (passed("--label")) s.label = f.label;
    if (passed("--seeds")) s.seeds = f.seeds;
    if (passed("--gamma")) s.sim.gamma = f.gamma;
    if (passed("--n-train")) s.sim.n_train = f.n_train;
    if (passed("--n-val")) s.sim.n_val = f.n_val;
    if (passed("--n-test")) s.sim.n_test = f.n_test;
    if (passed("--t-len")) s.sim.t_len = f.t_len;
    if (passed("--tau-max")) s.sim.tau_max = f.tau_max;
    if (passed("--cf-scheme"))
      s.sim.scheme =
          f.cf_scheme == "random" ? cfseq::CfScheme::Random : cfseq::CfScheme::SingleSliding;
    if (passed("--n-blocks")) s.model.n_blocks = f.n_blocks;
    if (passed("--d-h")) s.model.d_h = f.d_h;
    if (passed("--n-h")) s.model.n_h = f.n_h;
    if (passed("--d-r")) s.model.d_r = f.d_r;
    if (passed("--n-fc")) s.model.n_fc = f.n_fc;
    if (passed("--dropout")) s.model.dropout = f.dropout;
    if (passed("--l-max")) s.model.l_max = f.l_max;
    if (passed("--pe-mode"))
      s.model.pe_mode = f.pe_mode == "absolute"  ? cfseq::PeMode::Absolute
                        : f.pe_mode == "fixed"   ? cfseq::PeMode::RelativeFixed
                                                 : cfseq::PeMode::RelativeTrainable;
    if (passed("--attn-dropout")) s.model.attn_dropout = f.attn_dropout != 0;
    if (passed("--cross-attention"))
      for (int i = 0; i < 3; ++i) s.model.cross_attention[i] = f.cross[i] != 0;
    if (passed("--balancing"))
      s.train.balancing = f.balancing == "none"        ? cfseq::Balancing::None
                          : f.balancing == "gradreverse" ? cfseq::Balancing::GradReverse
                                                         : cfseq::Balancing::DomainConfusion;
    if (passed("--alpha")) s.train.alpha = f.alpha;
    if (passed("--ema-beta")) s.train.ema_beta = f.ema_beta;
    if (passed("--lr")) s.train.lr = f.lr;
    if (passed("--batch-size")) s.train.batch_size = f.batch_size;
    if (passed("--epochs")) s.train.epochs = f.epochs;
    if (passed("--augment")) s.train.augment = f.augment != 0;
    if (passed("--msm-outcome-ridge")) s.msm.outcome_ridge = f.msm_outcome_ridge;
    if (passed("--msm-propensity-ridge")) s.msm.propensity_ridge = f.msm_propensity_ridge;
  }
};

cfseq::ExperimentSpec build_spec(const std::string& out_dir, const std::string& config_path,
                                 const SpecOptions& so) {
  json merged = spec_to_json(cfseq::ExperimentSpec{});
  if (!config_path.empty()) {
    json file = cfseq::read_json(config_path);
    deep_merge(merged, file);
  }
  auto spec = spec_from_json(merged);
  so.apply(spec);
  spec.out_dir = out_dir;
  return spec;
}

void print_records(const std::vector<cfseq::MetricsRecord>& recs) {
  std::printf("%-12s %5s %3s %6s %11s %9s\n", "method", "gamma", "tau", "seed", "nrmse_pct",
              "wall_s");
  for (const auto& r : recs)
    std::printf("%-12s %5.2f %3ld %6llu %11.4f %9.1f\n", r.method.c_str(), r.gamma, r.tau,
                static_cast<unsigned long long>(r.seed), 100.0 * r.nrmse, r.wall_seconds);
}

json trajectory_to_json(const cfseq::Trajectory& tr) {
  return json{{"x", tr.x}, {"a", tr.a}, {"y", tr.y}, {"v", tr.v}};
}

int cmd_simulate(const cfseq::ExperimentSpec& spec_in, uint64_t seed) {
  auto spec = spec_in;
  cfseq::align_spec(spec);
  cfseq::SimConfig sim = spec.sim;
  sim.seed = seed;
  auto ds = cfseq::simulate_dataset(sim);

  std::string dir = spec.out_dir + "/simulate/seed_" + std::to_string(seed);
  cfseq::ensure_dir(dir);

  auto dump_split = [&](const char* name, const cfseq::SplitData& split) {
    std::string path = dir + "/" + name + ".jsonl";
    std::remove(path.c_str());
    for (const auto& tr : split.trajs) cfseq::append_jsonl(path, trajectory_to_json(tr));
    return split.trajs.size();
  };
  auto dump_cf = [&](const char* name, const std::vector<cfseq::CfTrajectory>& cfs) {
    std::string path = dir + "/" + name + ".jsonl";
    std::remove(path.c_str());
    for (const auto& cf : cfs)
      cfseq::append_jsonl(path, json{{"patient", cf.patient},
                                     {"origin", cf.origin},
                                     {"plan", cf.plan},
                                     {"y", cf.y}});
    return cfs.size();
  };

  long chemo = 0, steps = 0;
  for (const auto& tr : ds.train.trajs)
    for (long t = 0; t + 1 < sim.t_len; ++t, ++steps) chemo += cfseq::combo_has_chemo(tr.a[t]);

  json summary;
  summary["sim"] = cfseq::sim_config_to_json(sim);
  summary["v_max"] = sim.v_max;
  summary["n"] = {{"train", dump_split("train", ds.train)},
                  {"val", dump_split("val", ds.val)},
                  {"test", dump_split("test", ds.test)},
                  {"cf_one_step", dump_cf("cf_one_step", ds.cf_one_step)},
                  {"cf_tau_step", dump_cf("cf_tau_step", ds.cf_tau_step)}};
  summary["train_chemo_rate"] = static_cast<double>(chemo) / static_cast<double>(steps);
  cfseq::write_json(dir + "/summary.json", summary);

  std::printf("wrote %s\n", dir.c_str());
  std::printf("train/val/test: %ld/%ld/%ld patients, %zu one-step and %zu multi-step "
              "counterfactuals\n",
              sim.n_train, sim.n_val, sim.n_test, ds.cf_one_step.size(), ds.cf_tau_step.size());
  return 0;
}

int cmd_run_one(const cfseq::ExperimentSpec& spec_in, uint64_t seed, bool with_msm) {
  auto spec = spec_in;
  spec.with_msm = spec.with_msm && with_msm;
  spec.seeds = {seed};
  auto recs = cfseq::run_experiment(spec);
  print_records(recs);
  std::printf("run directory: %s\n", cfseq::run_dir(spec, seed).c_str());
  return 0;
}

int cmd_ablate(const cfseq::ExperimentSpec& base) {
  auto specs = cfseq::ablation_specs(base);
  specs.insert(specs.begin(), base);
  std::vector<cfseq::MetricsRecord> all;
  for (const auto& s : specs) {
    auto recs = cfseq::run_experiment(s);
    for (auto& r : recs)
      if (r.method != "msm") all.push_back(r);
  }

  // Per-variant, per-horizon mean and standard error over seeds.
  std::printf("%-22s %3s %11s %9s\n", "variant", "tau", "nrmse_pct", "se_pct");
  for (const auto& s : specs) {
    for (long tau = 1; tau <= s.sim.tau_max; ++tau) {
      std::vector<double> vals;
      for (const auto& r : all)
        if (r.method == s.label && r.tau == tau) vals.push_back(100.0 * r.nrmse);
      auto ms = cfseq::mean_and_se(vals);
      std::printf("%-22s %3ld %11.4f %9.4f\n", s.label.c_str(), tau, ms.mean, ms.se);
    }
  }
  return 0;
}

int cmd_importance(const cfseq::ExperimentSpec& base) {
  auto rows = cfseq::subnetwork_importance(base);
  std::printf("%-10s %3s %11s %9s\n", "stream", "tau", "delta_pct", "se_pct");
  for (const auto& r : rows)
    std::printf("%-10s %3ld %11.4f %9.4f\n", cfseq::stream_name(r.stream), r.tau,
                100.0 * r.mean, 100.0 * r.se);
  std::printf("table: %s/importance.tsv\n", base.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counterfactual treatment-outcome estimation over simulated tumor growth"};
  app.require_subcommand(1);

  std::string out_dir, config_path;
  SpecOptions sim_so, train_so, eval_so, abl_so, imp_so;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--out-dir", out_dir, "output directory")->required();
    cmd->add_option("--config", config_path, "JSON spec file; flags override it");
  };

  auto* c_sim = app.add_subcommand("simulate", "generate and persist a dataset");
  add_common(c_sim);
  sim_so.add(c_sim, false);

  auto* c_train = app.add_subcommand("train", "train the transformer for one seed");
  add_common(c_train);
  train_so.add(c_train, false);

  auto* c_eval = app.add_subcommand("evaluate",
                                    "one-seed comparison of transformer and weighted baseline");
  add_common(c_eval);
  eval_so.add(c_eval, false);

  auto* c_abl = app.add_subcommand("ablate", "run the ablation grid");
  add_common(c_abl);
  abl_so.add(c_abl, true);

  auto* c_imp = app.add_subcommand("importance", "per-stream importance by isolation");
  add_common(c_imp);
  imp_so.add(c_imp, true);

  auto* c_ver = app.add_subcommand("verify", "run numbered acceptance criteria");
  add_common(c_ver);
  std::vector<int> criteria;
  c_ver->add_option("--criterion", criteria, "criterion number (1-10); repeatable; default all")
      ->check(CLI::Range(1, 10));

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_sim->parsed()) return cmd_simulate(build_spec(out_dir, config_path, sim_so),
                                             sim_so.f.seed);
    if (c_train->parsed())
      return cmd_run_one(build_spec(out_dir, config_path, train_so), train_so.f.seed, false);
    if (c_eval->parsed())
      return cmd_run_one(build_spec(out_dir, config_path, eval_so), eval_so.f.seed, true);
    if (c_abl->parsed()) return cmd_ablate(build_spec(out_dir, config_path, abl_so));
    if (c_imp->parsed()) return cmd_importance(build_spec(out_dir, config_path, imp_so));
    if (c_ver->parsed()) {
      std::vector<int> ids = criteria;
      if (ids.empty())
        for (int i = 1; i <= 10; ++i) ids.push_back(i);
      auto results = cfseq::run_acceptance(ids, out_dir, std::cout);
      bool all = true;
      for (const auto& r : results) all = all && r.pass;
      return all ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
