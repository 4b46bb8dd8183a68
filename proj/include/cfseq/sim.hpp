#pragma once
// Pharmacokinetic-pharmacodynamic tumor growth benchmark.
//
// Simulates lung cancer patients under a Gompertz-style growth law with two
// binary treatments (chemotherapy, radiotherapy) whose assignment is
// confounded by recent tumor size. Because every noise draw is addressed by a
// counter key (seed, purpose, split, patient, step), the simulator can replay
// any patient under alternative treatment plans and produce ground-truth
// counterfactual outcomes that share the factual noise exactly.
//
// Volume recursion, one step per day:
//
//   Y_{t+1} = (1 + rho*log(K/Y_t) - beta_c*C_t - (alpha_r*d_t + beta_r*d_t^2)
//                + eps_t) * Y_t
//
// where C_t is the chemo drug concentration (one-day half-life decay plus a
// fixed dose on application) and d_t the radiotherapy dose at t. Treatment
// assignment is Bernoulli in the trailing mean tumor diameter:
//
//   p_t = sigmoid(gamma/D_max * (Dbar15_t - D_max/2))
//
// with the same p_t used independently for both treatments. gamma = 0 removes
// the confounding entirely (p = 1/2 regardless of history).

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfseq/data.hpp"
#include "cfseq/rng.hpp"

namespace cfseq {

inline constexpr double kPi = 3.14159265358979323846264338;

// Sphere geometry connects the two tumor size scales: volumes drive the
// dynamics, diameters drive treatment assignment.
inline double sphere_volume(double diameter) {
  return kPi / 6.0 * diameter * diameter * diameter;
}

inline double tumor_diameter(double volume) { return std::cbrt(6.0 * volume / kPi); }

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// How the tau-step counterfactual plans are laid out.
enum class CfScheme {
  SingleSliding,  // one treatment, swept across the projection window
  Random,         // independent uniform treatment at every slot
};

// All simulator knobs in one place. The recursion and the assignment
// mechanism above are fixed; every numeric constant is configuration with
// the defaults documented here, so experiments can override any of them
// without touching simulator code.
struct SimConfig {
  long n_train = 1000;
  long n_val = 200;
  long n_test = 200;
  long t_len = 30;    // days per trajectory, capped at 60
  double gamma = 2.0; // confounding strength in the assignment model
  long tau_max = 4;   // projection horizon for multi-step counterfactuals
  CfScheme scheme = CfScheme::SingleSliding;
  uint64_t seed = 11;

  // Tumor scale. d_max is the largest clinically plausible diameter; v_max is
  // the matching sphere volume and doubles as the upper clip of the dynamics
  // and the normalizer of reported errors.
  double d_max = 13.0;
  double v_max = sphere_volume(13.0); // ~1150.35 cm^3
  double carrying_capacity = sphere_volume(30.0); // K, ~14137.2 cm^3
  double v_min = 1e-3;   // lower clip, keeps volumes strictly positive
  double clip_cap = 0.0; // upper clip; 0 means "use v_max"

  // Dynamics constants.
  double noise_sd = 0.01;  // sd of the multiplicative growth noise eps_t
  double chemo_dose = 5.0; // concentration added per chemo application
  double radio_dose = 2.0; // radiotherapy dose (Gy) when applied
  long diam_window = 15;   // days in the trailing diameter average

  // Patient response priors. Growth rate is shared across the mixture; the
  // treatment sensitivities come from a three-component truncated-normal
  // mixture where the component scales both means, and the component index is
  // exposed to models as the single static covariate.
  double rho_mean = 7e-5;
  double rho_sd = 2e-5;
  double beta_c_mean = 0.028;  // chemo sensitivity
  double alpha_r_mean = 0.0398; // radio sensitivity (linear term)
  double sens_rel_sd = 0.1;    // sd of each sensitivity, relative to its mean
  double mixture_scale[3] = {0.8, 1.0, 1.2};

  // Initial tumor diameter prior, truncated to the plausible range.
  double init_diam_mean = 6.0;
  double init_diam_sd = 2.5;
  double init_diam_lo = 0.5;
  double init_diam_hi = 13.0;

  double cap() const { return clip_cap > 0.0 ? clip_cap : v_max; }

  void validate() const {
    std::ostringstream bad;
    auto req = [&](bool ok, const char* what) {
      if (!ok) bad << (bad.tellp() > 0 ? "; " : "") << what;
    };
    req(n_train >= 1, "n_train >= 1");
    req(n_val >= 0, "n_val >= 0");
    req(n_test >= 0, "n_test >= 0");
    req(t_len >= 2 && t_len <= 60, "t_len in [2, 60]");
    req(gamma >= 0.0, "gamma >= 0");
    req(tau_max >= 2 && tau_max <= t_len - 1, "tau_max in [2, t_len-1]");
    req(d_max > 0.0, "d_max > 0");
    req(v_max > 0.0, "v_max > 0");
    req(carrying_capacity > 0.0, "carrying_capacity > 0");
    req(v_min > 0.0 && v_min < cap(), "v_min in (0, cap)");
    req(noise_sd >= 0.0, "noise_sd >= 0");
    req(chemo_dose >= 0.0, "chemo_dose >= 0");
    req(radio_dose >= 0.0, "radio_dose >= 0");
    req(diam_window >= 1, "diam_window >= 1");
    req(rho_mean > 0.0 && rho_sd > 0.0, "rho prior positive");
    req(beta_c_mean > 0.0 && alpha_r_mean > 0.0 && sens_rel_sd > 0.0,
        "sensitivity priors positive");
    req(mixture_scale[0] > 0.0 && mixture_scale[1] > 0.0 && mixture_scale[2] > 0.0,
        "mixture scales positive");
    req(init_diam_lo > 0.0 && init_diam_lo < init_diam_hi && init_diam_hi <= d_max,
        "init diameter bounds in (0, d_max]");
    if (bad.tellp() > 0) throw std::invalid_argument("SimConfig: violated: " + bad.str());
  }
};

// Per-patient response parameters. The mixture component id doubles as the
// static covariate handed to models.
struct PatientResponse {
  double rho = 0.0;               // growth rate
  double carrying_capacity = 0.0; // K
  double beta_c = 0.0;            // chemo sensitivity
  double alpha_r = 0.0;           // radio sensitivity, linear in dose
  double beta_r = 0.0;            // radio sensitivity, quadratic; alpha_r/10
  long mixture_id = 0;            // 1..3
};

struct PatientDraw {
  PatientResponse resp;
  double init_volume = 0.0;
};

// Draw order is fixed (component, rho, beta_c, alpha_r, initial diameter) so
// a given rng state always yields the same patient.
inline PatientDraw sample_patient(const SimConfig& cfg, Rng& rng) {
  double inf = std::numeric_limits<double>::infinity();
  long comp = rng.uniform_int(3);
  double scale = cfg.mixture_scale[comp];
  PatientDraw d;
  d.resp.mixture_id = comp + 1;
  d.resp.carrying_capacity = cfg.carrying_capacity;
  d.resp.rho = rng.truncated_normal(cfg.rho_mean, cfg.rho_sd, 0.0, inf);
  double bc = cfg.beta_c_mean * scale;
  double ar = cfg.alpha_r_mean * scale;
  d.resp.beta_c = rng.truncated_normal(bc, cfg.sens_rel_sd * bc, 0.0, inf);
  d.resp.alpha_r = rng.truncated_normal(ar, cfg.sens_rel_sd * ar, 0.0, inf);
  d.resp.beta_r = d.resp.alpha_r / 10.0;
  double diam = rng.truncated_normal(cfg.init_diam_mean, cfg.init_diam_sd, cfg.init_diam_lo,
                                     cfg.init_diam_hi);
  d.init_volume = sphere_volume(diam);
  return d;
}

// Drug concentration: one-day half-life decay plus a fixed dose on
// application.
inline double chemo_concentration(double prev, bool applied, double dose) {
  if (prev < 0.0) throw std::invalid_argument("chemo_concentration: negative concentration");
  return prev / 2.0 + (applied ? dose : 0.0);
}

// One day of the volume recursion, clipped into [v_min, cap].
inline double step_volume(const SimConfig& cfg, double y, double conc, double dose,
                          const PatientResponse& r, double eps) {
  if (!(y > 0.0)) throw std::domain_error("step_volume: volume must be positive");
  double growth = r.rho * std::log(r.carrying_capacity / y);
  double chemo = r.beta_c * conc;
  double radio = r.alpha_r * dose + r.beta_r * dose * dose;
  double next = (1.0 + growth - chemo - radio + eps) * y;
  if (next < cfg.v_min) next = cfg.v_min;
  double cap = cfg.cap();
  if (next > cap) next = cap;
  return next;
}

// Mean diameter over the trailing window ending at step t (inclusive).
// Shorter prefixes average whatever history exists.
inline double mean_recent_diameter(const std::vector<double>& volumes, long t, long window) {
  if (t < 0 || t >= static_cast<long>(volumes.size()))
    throw std::invalid_argument("mean_recent_diameter: step out of range");
  long lo = t - window + 1;
  if (lo < 0) lo = 0;
  double sum = 0.0;
  for (long i = lo; i <= t; ++i) sum += tumor_diameter(volumes[i]);
  return sum / static_cast<double>(t - lo + 1);
}

inline double assign_probability(double dbar, double gamma, double d_max) {
  return sigmoid(gamma / d_max * (dbar - d_max / 2.0));
}

struct TreatmentDraw {
  bool chemo = false;
  bool radio = false;
  double p = 0.0; // the shared assignment probability
};

// Both treatments use the same probability but independent uniforms. The
// uniform-argument form lets the dataset path feed counter-based draws; the
// Rng form matches interactive use.
inline TreatmentDraw assign_treatments(const std::vector<double>& volumes, long t,
                                       const SimConfig& cfg, double u_chemo, double u_radio) {
  TreatmentDraw d;
  d.p = assign_probability(mean_recent_diameter(volumes, t, cfg.diam_window), cfg.gamma,
                           cfg.d_max);
  d.chemo = u_chemo < d.p;
  d.radio = u_radio < d.p;
  return d;
}

inline TreatmentDraw assign_treatments(const std::vector<double>& volumes, long t,
                                       const SimConfig& cfg, Rng& rng) {
  double uc = rng.uniform();
  double ur = rng.uniform();
  return assign_treatments(volumes, t, cfg, uc, ur);
}

// Treatment combo ids: bit 0 chemo, bit 1 radio.
inline bool combo_has_chemo(long a) { return (a & 1) != 0; }
inline bool combo_has_radio(long a) { return (a & 2) != 0; }

// Purpose tags keep the counter streams of the four stochastic consumers
// disjoint even when the remaining key components collide.
namespace simtag {
inline constexpr uint64_t Patient = 0x50415449; // response + initial volume
inline constexpr uint64_t Noise = 0x4e4f4953;   // growth noise eps_t
inline constexpr uint64_t Chemo = 0x4348454d;   // chemo assignment uniform
inline constexpr uint64_t Radio = 0x52414449;   // radio assignment uniform
inline constexpr uint64_t Plan = 0x504c414e;    // random counterfactual plans
} // namespace simtag

inline uint64_t sim_key(uint64_t seed, uint64_t tag, uint64_t split, uint64_t patient,
                        uint64_t t) {
  return hash_combine(hash_combine(hash3(seed, tag, split), patient), t);
}

// One simulated patient: the model-facing trajectory plus the simulator-side
// state needed to replay counterfactuals (response, concentrations) and to
// audit the assignment mechanism (probabilities).
struct SimulatedPatient {
  Trajectory traj; // x = [diameter, trailing mean diameter], a = combo, y = volume
  PatientResponse resp;
  std::vector<double> conc; // C_t consumed by the step from t to t+1
  std::vector<double> prob; // assignment probability at each step
};

// Splits are keyed separately so resizing one split never reshuffles another.
enum class Split { Train = 0, Val = 1, Test = 2 };

inline SimulatedPatient simulate_patient(const SimConfig& cfg, Split split, long index) {
  uint64_t sp = static_cast<uint64_t>(split);
  uint64_t pt = static_cast<uint64_t>(index);
  Rng prng(sim_key(cfg.seed, simtag::Patient, sp, pt, 0));
  PatientDraw draw = sample_patient(cfg, prng);

  SimulatedPatient out;
  out.resp = draw.resp;
  long T = cfg.t_len;
  out.traj.x.resize(T * 2);
  out.traj.a.resize(T);
  out.traj.y.resize(T);
  out.traj.v = {static_cast<double>(draw.resp.mixture_id)};
  out.conc.resize(T);
  out.prob.resize(T);

  std::vector<double>& y = out.traj.y;
  y[0] = draw.init_volume;
  double c_prev = 0.0;
  for (long t = 0; t < T; ++t) {
    double uc = counter_uniform(sim_key(cfg.seed, simtag::Chemo, sp, pt, t));
    double ur = counter_uniform(sim_key(cfg.seed, simtag::Radio, sp, pt, t));
    TreatmentDraw d = assign_treatments(y, t, cfg, uc, ur);
    out.traj.x[t * 2] = tumor_diameter(y[t]);
    out.traj.x[t * 2 + 1] = mean_recent_diameter(y, t, cfg.diam_window);
    out.traj.a[t] = (d.chemo ? 1L : 0L) | (d.radio ? 2L : 0L);
    out.prob[t] = d.p;
    double c = chemo_concentration(c_prev, d.chemo, cfg.chemo_dose);
    out.conc[t] = c;
    c_prev = c;
    if (t + 1 < T) {
      double eps =
          counter_normal(sim_key(cfg.seed, simtag::Noise, sp, pt, t), 0.0, cfg.noise_sd);
      y[t + 1] = step_volume(cfg, y[t], c, d.radio ? cfg.radio_dose : 0.0, out.resp, eps);
    }
  }
  return out;
}

// Ground-truth outcomes for one intervention sequence. History before the
// origin stays factual; treatments at steps origin .. origin+len-1 follow the
// plan; the noise draws are the factual ones, so replaying the factual combos
// reproduces the factual volumes bitwise.
inline std::vector<double> replay_plan(const SimConfig& cfg, const SimulatedPatient& p,
                                       Split split, long index, long origin,
                                       const std::vector<long>& plan) {
  long T = cfg.t_len;
  if (origin < 0 || origin + static_cast<long>(plan.size()) > T - 1)
    throw std::invalid_argument("replay_plan: origin + plan length exceeds trajectory");
  uint64_t sp = static_cast<uint64_t>(split);
  uint64_t pt = static_cast<uint64_t>(index);
  double y = p.traj.y[origin];
  double c_prev = origin > 0 ? p.conc[origin - 1] : 0.0;
  std::vector<double> out(plan.size());
  for (size_t k = 0; k < plan.size(); ++k) {
    long t = origin + static_cast<long>(k);
    bool ch = combo_has_chemo(plan[k]);
    bool ra = combo_has_radio(plan[k]);
    double c = chemo_concentration(c_prev, ch, cfg.chemo_dose);
    double eps = counter_normal(sim_key(cfg.seed, simtag::Noise, sp, pt, t), 0.0, cfg.noise_sd);
    y = step_volume(cfg, y, c, ra ? cfg.radio_dose : 0.0, p.resp, eps);
    out[k] = y;
    c_prev = c;
  }
  return out;
}

// The 2*(tau_max-1) single-sliding plans: one treatment type active at one
// slot, everything else untreated. The active slot sweeps offsets
// 1 .. tau_max-1; offset 0 is exactly the single-treatment one-step
// counterfactual already enumerated at the same origin, so the sweep starts
// one step later while keeping the window end at origin + tau_max - 1.
inline std::vector<std::vector<long>> single_sliding_plans(long tau_max) {
  std::vector<std::vector<long>> plans;
  for (long type = 0; type < 2; ++type) {
    long combo = type == 0 ? 1 : 2; // chemo only, then radio only
    for (long offset = 1; offset < tau_max; ++offset) {
      std::vector<long> plan(tau_max, 0);
      plan[offset] = combo;
      plans.push_back(std::move(plan));
    }
  }
  return plans;
}

// The 2*(tau_max-1) random plans: every slot uniform over the four combos,
// drawn from a counter-keyed stream so the plan set is a pure function of
// (seed, split, patient, origin).
inline std::vector<std::vector<long>> random_plans(const SimConfig& cfg, Split split, long index,
                                                   long origin) {
  Rng rng(sim_key(cfg.seed, simtag::Plan, static_cast<uint64_t>(split),
                  static_cast<uint64_t>(index), static_cast<uint64_t>(origin)));
  long count = 2 * (cfg.tau_max - 1);
  std::vector<std::vector<long>> plans(count);
  for (long i = 0; i < count; ++i) {
    plans[i].resize(cfg.tau_max);
    for (long k = 0; k < cfg.tau_max; ++k) plans[i][k] = rng.uniform_int(4);
  }
  return plans;
}

// Ground truth for one counterfactual trajectory of a test patient.
struct CfTrajectory {
  long patient = 0; // index within the test split
  long origin = 0;  // last factual step; the plan starts here
  std::vector<long> plan;
  std::vector<double> y; // volumes at origin+1 .. origin+plan.size()
};

struct SplitData {
  std::vector<Trajectory> trajs;
  std::vector<PatientResponse> resp;
  std::vector<std::vector<double>> prob;
  std::vector<std::vector<double>> conc;
};

struct Dataset {
  SplitData train, val, test;
  // One-step set: every origin 0 .. T-2, all four combos.
  std::vector<CfTrajectory> cf_one_step;
  // Multi-step set: every origin 0 .. T-1-tau_max, 2*(tau_max-1) plans.
  std::vector<CfTrajectory> cf_tau_step;
};

inline void simulate_split(const SimConfig& cfg, Split split, long n, SplitData& out,
                           std::vector<SimulatedPatient>* keep = nullptr) {
  out.trajs.reserve(n);
  out.resp.reserve(n);
  out.prob.reserve(n);
  out.conc.reserve(n);
  for (long i = 0; i < n; ++i) {
    SimulatedPatient p = simulate_patient(cfg, split, i);
    out.resp.push_back(p.resp);
    out.prob.push_back(p.prob);
    out.conc.push_back(p.conc);
    if (keep) keep->push_back(p);
    out.trajs.push_back(std::move(p.traj));
  }
}

// Factual data for all three splits plus ground-truth counterfactuals for the
// test split. Counterfactuals are evaluated only after a rolling origin, so
// per origin the plan replaces the factual treatments from that step on and
// everything earlier stays factual.
inline Dataset simulate_dataset(const SimConfig& cfg) {
  cfg.validate();
  Dataset ds;
  simulate_split(cfg, Split::Train, cfg.n_train, ds.train);
  simulate_split(cfg, Split::Val, cfg.n_val, ds.val);
  std::vector<SimulatedPatient> test_patients;
  test_patients.reserve(cfg.n_test);
  simulate_split(cfg, Split::Test, cfg.n_test, ds.test, &test_patients);

  long T = cfg.t_len;
  for (long i = 0; i < cfg.n_test; ++i) {
    const SimulatedPatient& p = test_patients[i];
    for (long origin = 0; origin <= T - 2; ++origin) {
      for (long combo = 0; combo < 4; ++combo) {
        CfTrajectory cf;
        cf.patient = i;
        cf.origin = origin;
        cf.plan = {combo};
        cf.y = replay_plan(cfg, p, Split::Test, i, origin, cf.plan);
        ds.cf_one_step.push_back(std::move(cf));
      }
    }
    for (long origin = 0; origin <= T - 1 - cfg.tau_max; ++origin) {
      std::vector<std::vector<long>> plans = cfg.scheme == CfScheme::SingleSliding
                                                 ? single_sliding_plans(cfg.tau_max)
                                                 : random_plans(cfg, Split::Test, i, origin);
      for (auto& plan : plans) {
        CfTrajectory cf;
        cf.patient = i;
        cf.origin = origin;
        cf.plan = std::move(plan);
        cf.y = replay_plan(cfg, p, Split::Test, i, origin, cf.plan);
        ds.cf_tau_step.push_back(std::move(cf));
      }
    }
  }
  return ds;
}

} // namespace cfseq
