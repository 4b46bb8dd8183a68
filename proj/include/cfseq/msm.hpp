#pragma once
// Marginal structural models baseline.
//
// Treatment combos are bit patterns over independent binary channels. Two
// logistic regressions per channel estimate the assignment probability: the
// "nominator" conditions only on cumulative past treatment counts, the
// "denominator" on the full recent history. Their ratio, multiplied across
// the steps being intervened on, gives the stabilized inverse-probability
// weight
//
//   SW(t, tau) = prod_{n=t}^{t+tau-1} f_nom(A_n) / f_den(A_n)
//
// which is normalized to mean one and truncated at its 1st/99th percentiles.
// Counterfactual outcomes are then predicted by one weighted ridge regression
// per horizon tau on history features plus the planned treatment bits.
//
// History features at step t (at t = 0 the lag repeats the current value,
// which keeps those rows off the extreme ends of the X_t - X_{t-1} and
// Y_t - Y_{t-1} directions):
//
//   [1, X_t, X_{t-1}, Y_t, Y_{t-1}, V, combo counts over n < t]

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cfseq/data.hpp"
#include "cfseq/regress.hpp"

namespace cfseq {

struct MsmConfig {
  long d_x = 2;
  long d_y = 1; // the outcome regressions are scalar
  long d_v = 1;
  long n_channels = 2; // treatment combos are bit patterns, d_a = 2^n_channels
  long tau_max = 4;
  double outcome_ridge = 1e-8;
  // Ridge on the z-scored propensity design. Without it, single extreme rows
  // (one-day volume swings) own entire near-collinear feature directions and
  // their fitted propensity follows their private coin flip.
  double propensity_ridge = 0.01;
  double prob_floor = 1e-6; // floor on denominator probabilities
  double trunc_lo = 0.01;
  double trunc_hi = 0.99;

  long d_a() const { return 1L << n_channels; }
  long history_dim() const { return 1 + 2 * d_x + 2 * d_y + d_v + d_a(); }
  long nominator_dim() const { return 1 + d_a(); }
  long outcome_dim(long tau) const { return history_dim() + n_channels * tau; }

  void validate() const {
    if (d_x < 0 || d_y != 1 || d_v < 0 || n_channels < 1 || tau_max < 1)
      throw std::invalid_argument("MsmConfig: invalid dimensions");
    if (!(trunc_lo >= 0.0 && trunc_lo < trunc_hi && trunc_hi <= 1.0))
      throw std::invalid_argument("MsmConfig: invalid truncation quantiles");
  }
};

// [1, X_t, X_{t-1}, Y_t, Y_{t-1}, V, per-combo counts over n < t].
inline void msm_history_features(const MsmConfig& cfg, const Trajectory& tr, long t,
                                 double* out) {
  long T = tr.t_len(cfg.d_y);
  if (t < 0 || t >= T) throw std::invalid_argument("msm_history_features: step out of range");
  long lag = t > 0 ? t - 1 : 0;
  long j = 0;
  out[j++] = 1.0;
  for (long i = 0; i < cfg.d_x; ++i) out[j++] = tr.x[t * cfg.d_x + i];
  for (long i = 0; i < cfg.d_x; ++i) out[j++] = tr.x[lag * cfg.d_x + i];
  for (long i = 0; i < cfg.d_y; ++i) out[j++] = tr.y[t * cfg.d_y + i];
  for (long i = 0; i < cfg.d_y; ++i) out[j++] = tr.y[lag * cfg.d_y + i];
  for (long i = 0; i < cfg.d_v; ++i) out[j++] = tr.v[i];
  for (long a = 0; a < cfg.d_a(); ++a) {
    double count = 0.0;
    for (long n = 0; n < t; ++n) count += tr.a[n] == a;
    out[j++] = count;
  }
}

// [1, per-combo counts over n < t].
inline void msm_nominator_features(const MsmConfig& cfg, const Trajectory& tr, long t,
                                   double* out) {
  long j = 0;
  out[j++] = 1.0;
  for (long a = 0; a < cfg.d_a(); ++a) {
    double count = 0.0;
    for (long n = 0; n < t; ++n) count += tr.a[n] == a;
    out[j++] = count;
  }
}

struct MsmPropensity {
  std::vector<LogisticFit> nom; // one per channel
  std::vector<LogisticFit> den;

  bool any_separation() const {
    for (const auto& f : nom)
      if (f.separation) return true;
    for (const auto& f : den)
      if (f.separation) return true;
    return false;
  }
};

// Probability the per-channel models assign to the observed combo: product
// over channels of p(bit set) or 1 - p.
inline double observed_combo_prob(const std::vector<LogisticFit>& models, const double* feats,
                                  long combo) {
  double p = 1.0;
  for (size_t c = 0; c < models.size(); ++c) {
    double pc = logistic_prob(models[c].w, feats);
    p *= ((combo >> c) & 1) ? pc : 1.0 - pc;
  }
  return p;
}

// Raw stabilized weight for the chunk starting at t with horizon tau: the
// factors cover exactly the treatments A_t .. A_{t+tau-1} that affect the
// target Y_{t+tau}. Denominator probabilities are floored; a hit sets *floored.
inline double stabilized_weight(const MsmConfig& cfg, const MsmPropensity& prop,
                                const Trajectory& tr, long t, long tau,
                                bool* floored = nullptr) {
  long T = tr.t_len(cfg.d_y);
  if (t < 0 || t + tau > T - 1)
    throw std::invalid_argument("stabilized_weight: window exceeds trajectory");
  std::vector<double> hist(cfg.history_dim()), nomf(cfg.nominator_dim());
  double w = 1.0;
  for (long n = t; n < t + tau; ++n) {
    msm_history_features(cfg, tr, n, hist.data());
    msm_nominator_features(cfg, tr, n, nomf.data());
    double num = observed_combo_prob(prop.nom, nomf.data(), tr.a[n]);
    double den = observed_combo_prob(prop.den, hist.data(), tr.a[n]);
    if (den < cfg.prob_floor) {
      den = cfg.prob_floor;
      if (floored) *floored = true;
    }
    w *= num / den;
  }
  return w;
}

// Interpolated empirical quantile (linear between order statistics).
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile: q outside [0, 1]");
  std::sort(v.begin(), v.end());
  double r = q * static_cast<double>(v.size() - 1);
  size_t lo = static_cast<size_t>(r);
  double frac = r - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

struct ProcessedWeights {
  std::vector<double> w;
  double mean_raw = 0.0; // mean before normalization
  double lo = 0.0, hi = 0.0; // truncation bounds on the normalized scale
};

// Normalize to mean one, then clamp to the interpolated percentiles of the
// normalized weights.
inline ProcessedWeights process_weights(std::vector<double> raw, double q_lo, double q_hi) {
  if (raw.empty()) throw std::invalid_argument("process_weights: empty sample");
  ProcessedWeights out;
  double mean = 0.0;
  for (double w : raw) mean += w;
  mean /= static_cast<double>(raw.size());
  if (!(mean > 0.0)) throw std::runtime_error("process_weights: nonpositive mean weight");
  out.mean_raw = mean;
  for (double& w : raw) w /= mean;
  out.lo = percentile(raw, q_lo);
  out.hi = percentile(raw, q_hi);
  for (double& w : raw) w = std::min(std::max(w, out.lo), out.hi);
  out.w = std::move(raw);
  return out;
}

struct MsmModel {
  MsmConfig cfg;
  MsmPropensity prop;
  std::vector<WlsFit> outcome;  // index tau - 1
  std::vector<double> trunc_lo; // per-tau truncation bounds, for reporting
  std::vector<double> trunc_hi;
  bool floor_hit = false;
};

// Propensity rows cover every step of every trajectory; each channel gets its
// own label column.
inline MsmPropensity fit_msm_propensity(const MsmConfig& cfg,
                                        const std::vector<Trajectory>& trajs) {
  long hd = cfg.history_dim(), nd = cfg.nominator_dim();
  long rows = 0;
  for (const auto& tr : trajs) rows += tr.t_len(cfg.d_y);
  std::vector<double> hist(rows * hd), nomf(rows * nd);
  std::vector<std::vector<double>> labels(cfg.n_channels, std::vector<double>(rows));
  long i = 0;
  for (const auto& tr : trajs) {
    long T = tr.t_len(cfg.d_y);
    for (long t = 0; t < T; ++t, ++i) {
      msm_history_features(cfg, tr, t, hist.data() + i * hd);
      msm_nominator_features(cfg, tr, t, nomf.data() + i * nd);
      for (long c = 0; c < cfg.n_channels; ++c)
        labels[c][i] = static_cast<double>((tr.a[t] >> c) & 1);
    }
  }
  MsmPropensity prop;
  for (long c = 0; c < cfg.n_channels; ++c) {
    prop.nom.push_back(fit_logistic_standardized(nomf, labels[c], rows, nd, cfg.propensity_ridge));
    prop.den.push_back(fit_logistic_standardized(hist, labels[c], rows, hd, cfg.propensity_ridge));
  }
  return prop;
}

// Design matrix for horizon tau: history features at the origin plus the
// treatment bits of the tau planned steps. Fitting uses the factual bits.
inline void msm_outcome_features(const MsmConfig& cfg, const Trajectory& tr, long origin,
                                 const long* plan, long tau, double* out) {
  msm_history_features(cfg, tr, origin, out);
  long j = cfg.history_dim();
  for (long k = 0; k < tau; ++k)
    for (long c = 0; c < cfg.n_channels; ++c)
      out[j++] = static_cast<double>((plan[k] >> c) & 1);
}

// Fits propensities then one outcome regression per horizon. A caller may
// supply ready-made propensity models (diagnostics, reuse across refits).
inline MsmModel fit_msm(const MsmConfig& cfg, const std::vector<Trajectory>& trajs,
                        const MsmPropensity* prop = nullptr) {
  cfg.validate();
  if (trajs.empty()) throw std::invalid_argument("fit_msm: no trajectories");
  MsmModel m;
  m.cfg = cfg;
  m.prop = prop ? *prop : fit_msm_propensity(cfg, trajs);
  for (long tau = 1; tau <= cfg.tau_max; ++tau) {
    long d = cfg.outcome_dim(tau);
    std::vector<double> feats, targets, raw;
    long rows = 0;
    for (const auto& tr : trajs) {
      long T = tr.t_len(cfg.d_y);
      for (long t = 0; t + tau <= T - 1; ++t, ++rows) {
        feats.resize(feats.size() + d);
        msm_outcome_features(cfg, tr, t, tr.a.data() + t, tau, feats.data() + rows * d);
        targets.push_back(tr.y[(t + tau) * cfg.d_y]);
        bool floored = false;
        raw.push_back(stabilized_weight(cfg, m.prop, tr, t, tau, &floored));
        m.floor_hit = m.floor_hit || floored;
      }
    }
    if (rows == 0) throw std::invalid_argument("fit_msm: trajectories shorter than horizon");
    ProcessedWeights pw = process_weights(std::move(raw), cfg.trunc_lo, cfg.trunc_hi);
    m.outcome.push_back(ridge_wls(feats, targets, pw.w, rows, d, cfg.outcome_ridge));
    m.trunc_lo.push_back(pw.lo);
    m.trunc_hi.push_back(pw.hi);
  }
  return m;
}

// Predictions for horizons 1 .. plan.size() from one origin, each from its
// own per-tau regression using the first tau planned combos.
inline std::vector<double> msm_predict(const MsmModel& m, const Trajectory& tr, long origin,
                                       const std::vector<long>& plan) {
  long tau_len = static_cast<long>(plan.size());
  if (tau_len < 1 || tau_len > static_cast<long>(m.outcome.size()))
    throw std::invalid_argument("msm_predict: plan length outside fitted horizons");
  for (long a : plan)
    if (a < 0 || a >= m.cfg.d_a()) throw std::invalid_argument("msm_predict: combo out of range");
  std::vector<double> preds(tau_len);
  std::vector<double> feats(m.cfg.outcome_dim(tau_len));
  for (long tau = 1; tau <= tau_len; ++tau) {
    long d = m.cfg.outcome_dim(tau);
    msm_outcome_features(m.cfg, tr, origin, plan.data(), tau, feats.data());
    preds[tau - 1] = dot_row(m.outcome[tau - 1].w.data(), feats.data(), d);
  }
  return preds;
}

} // namespace cfseq
