#pragma once
// Adversarial training with domain confusion.
//
// Each step runs two passes. Pass one trains the representation and the
// outcome head: the frozen exponential-moving-average copy of the treatment
// classifier scores the live representation, and its confusion loss (the
// mean negative log-probability across all classes) is added to the outcome
// loss with weight alpha_e. Pass two trains the live classifier on the
// just-updated EMA representation, which never receives gradients. EMA
// shadows of all three groups follow their live counterparts.
//
// Determinism: every stochastic choice (shuffling, augmentation cutoffs, the
// dropout masks of either pass) draws from its own counter-derived stream
// keyed by (seed, purpose, epoch, step). Turning one consumer on or off
// never shifts the draws seen by another, which is what makes the alpha = 0
// run bit-identical to plain supervised training.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "model.hpp"

namespace cfseq {

enum class Balancing { None = 0, DomainConfusion = 1, GradReverse = 2 };

struct TrainConfig {
  Balancing balancing = Balancing::DomainConfusion;
  double alpha = 0.01;     // final confusion weight after the rise
  double ema_beta = 0.99;  // 0 keeps the shadows as exact copies
  double lr = 0.01;
  long batch_size = 64;
  long epochs = 40;
  bool augment = true;  // duplicate each sample with a random covariate cutoff
  uint64_t seed = 11;
  double adam_b1 = 0.9, adam_b2 = 0.999, adam_eps = 1e-8;
};

// ---------------------------------------------------------------------------
// Losses

// Mean squared error over every element of the prediction block.
inline TensorPtr outcome_loss(Tape& tape, const TensorPtr& y_hat, const TensorPtr& y_next) {
  if (y_hat->rows() != y_next->rows() || y_hat->cols() != y_next->cols())
    throw std::invalid_argument("outcome_loss: shape mismatch");
  auto d = sub(tape, y_hat, y_next);
  return scale(tape, sum_all(tape, square(tape, d)), 1.0 / static_cast<double>(y_hat->size()));
}

// Cross-entropy against one-hot targets, mean over rows.
inline TensorPtr propensity_loss(Tape& tape, const TensorPtr& probs, const TensorPtr& onehot) {
  if (probs->rows() != onehot->rows() || probs->cols() != onehot->cols())
    throw std::invalid_argument("propensity_loss: shape mismatch");
  auto lp = log_floor(tape, probs);
  return scale(tape, sum_all(tape, mul(tape, lp, onehot)),
               -1.0 / static_cast<double>(probs->rows()));
}

// Confusion objective: mean negative log-probability over every class of
// every row. Minimized when the classifier outputs the uniform distribution.
inline TensorPtr confusion_loss(Tape& tape, const TensorPtr& probs) {
  auto lp = log_floor(tape, probs);
  return scale(tape, sum_all(tape, lp), -1.0 / static_cast<double>(probs->size()));
}

// Exponential rise of the confusion weight: 0 before training starts, then
// alpha * (2 / (1 + exp(-10 e / n)) - 1) for epoch e of n (1-based).
inline double alpha_rise(long epoch, long n_epochs, double alpha) {
  if (epoch <= 0 || n_epochs <= 0 || alpha == 0.0) return 0.0;
  double r = static_cast<double>(epoch) / static_cast<double>(n_epochs);
  return alpha * (2.0 / (1.0 + std::exp(-10.0 * r)) - 1.0);
}

// ---------------------------------------------------------------------------
// Optimizer and moving averages

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<TensorPtr> params, double lr, double b1 = 0.9, double b2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->size(), 0.0);
      v_[i].assign(params_[i]->size(), 0.0);
    }
  }

  // Applies one update from the currently accumulated gradients. A zero
  // learning rate is an exact no-op: parameters, slots, and the step counter
  // all stay bitwise untouched.
  void step() {
    if (lr_ == 0.0) return;
    ++t_;
    double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i];
      if (!p.requires_grad) continue;
      for (size_t k = 0; k < p.size(); ++k) {
        double g = p.grad.empty() ? 0.0 : p.grad[k];
        m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g;
        v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g * g;
        double mhat = m_[i][k] / c1;
        double vhat = v_[i][k] / c2;
        p.data[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  long steps_taken() const { return t_; }
  double lr() const { return lr_; }

 private:
  std::vector<TensorPtr> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_ = 0.0, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

inline std::vector<TensorPtr> params_of_group(const ModelParams& p, ParamGroup g) {
  std::vector<TensorPtr> out;
  for (auto& np : named_params(p))
    if (np.group == g) out.push_back(np.t);
  return out;
}

inline void zero_all_grads(const ModelParams& p) {
  for (auto& np : named_params(p)) np.t->zero_grad();
}

// shadow <- beta * shadow + (1 - beta) * live, for one parameter group or
// (without the group argument) everything. beta = 0 copies exactly.
inline void ema_update(ModelParams& shadow, const ModelParams& live, double beta,
                       const ParamGroup* group = nullptr) {
  auto s = named_params(shadow);
  auto l = named_params(live);
  if (s.size() != l.size()) throw std::logic_error("ema_update: parameter structure mismatch");
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i].name != l[i].name) throw std::logic_error("ema_update: name mismatch " + s[i].name);
    if (group && s[i].group != *group) continue;
    auto& sd = s[i].t->data;
    auto& ld = l[i].t->data;
    if (beta == 0.0) {
      sd = ld;
    } else {
      for (size_t k = 0; k < sd.size(); ++k) sd[k] = beta * sd[k] + (1.0 - beta) * ld[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Training state and the per-step update

struct TrainState {
  ModelParams live;
  ModelParams ema;  // frozen copies, updated via ema_update only
  Adam opt_repr, opt_outcome, opt_propensity;
  long epoch = 0;
};

inline TrainState init_train(const ModelConfig& mcfg, const TrainConfig& tcfg) {
  TrainState st;
  st.live = init_params(mcfg, tcfg.seed);
  st.ema = clone_params(st.live, /*trainable=*/false);
  st.opt_repr = Adam(params_of_group(st.live, ParamGroup::Repr), tcfg.lr, tcfg.adam_b1,
                     tcfg.adam_b2, tcfg.adam_eps);
  st.opt_outcome = Adam(params_of_group(st.live, ParamGroup::OutcomeHead), tcfg.lr, tcfg.adam_b1,
                        tcfg.adam_b2, tcfg.adam_eps);
  st.opt_propensity = Adam(params_of_group(st.live, ParamGroup::PropensityHead), tcfg.lr,
                           tcfg.adam_b1, tcfg.adam_b2, tcfg.adam_eps);
  return st;
}

struct StepTrace {
  double l_gy = std::numeric_limits<double>::quiet_NaN();
  double l_ga = std::numeric_limits<double>::quiet_NaN();
  double l_conf = std::numeric_limits<double>::quiet_NaN();
  long n_valid = 0;
  // Which parameters produced the representation consumed by the classifier
  // update. Domain confusion must report the EMA copy.
  const ModelParams* propensity_repr_source = nullptr;
  bool used_ema_repr = false;
};

namespace rngtag {
constexpr uint64_t Shuffle = 0x53465535;
constexpr uint64_t Augment = 0x41554736;
constexpr uint64_t DropMain = 0x44523141;
constexpr uint64_t DropCls = 0x44523242;
}  // namespace rngtag

inline Rng step_rng(uint64_t seed, uint64_t tag, long epoch, long step) {
  return Rng(hash3(seed, tag, static_cast<uint64_t>(epoch) * 0x100000ULL +
                                  static_cast<uint64_t>(step)));
}

// One minibatch update. epoch and step key the dropout streams; alpha_e and
// lambda_e come from the rise schedule of the epoch.
inline StepTrace adversarial_step(TrainState& st, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg, const ModelInput& in, double alpha_e,
                                  double lambda_e, long epoch, long step) {
  StepTrace tr;
  tr.n_valid = static_cast<long>(in.valid_rows.size());
  zero_all_grads(st.live);

  // Pass one: outcome and representation (plus, under gradient reversal,
  // the classifier, all on a single tape).
  Rng d1 = step_rng(tcfg.seed, rngtag::DropMain, epoch, step);
  Tape tape;
  auto fwd = model_forward(tape, st.live, mcfg, in, /*training=*/true, &d1);
  auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
  auto y_hat = predict_outcome(tape, st.live.outcome, phi_sel, in.a_cur);
  auto l_gy = outcome_loss(tape, y_hat, in.y_next);
  tr.l_gy = l_gy->at(0, 0);

  TensorPtr total = l_gy;
  if (tcfg.balancing == Balancing::DomainConfusion && alpha_e != 0.0) {
    auto probs = classify_treatment(tape, st.ema.propensity, phi_sel);
    auto l_conf = confusion_loss(tape, probs);
    tr.l_conf = l_conf->at(0, 0);
    total = add(tape, l_gy, scale(tape, l_conf, alpha_e));
  } else if (tcfg.balancing == Balancing::GradReverse) {
    auto probs = classify_treatment(tape, st.live.propensity,
                                    grad_reverse(tape, phi_sel, lambda_e));
    auto l_ga = propensity_loss(tape, probs, in.a_cur);
    tr.l_ga = l_ga->at(0, 0);
    tr.propensity_repr_source = fwd.repr_source;
    total = add(tape, l_gy, l_ga);
  }
  backward(tape, total);

  st.opt_outcome.step();
  st.opt_repr.step();
  if (tcfg.balancing == Balancing::GradReverse) st.opt_propensity.step();

  const ParamGroup repr = ParamGroup::Repr, outg = ParamGroup::OutcomeHead,
                   propg = ParamGroup::PropensityHead;
  ema_update(st.ema, st.live, tcfg.ema_beta, &repr);
  ema_update(st.ema, st.live, tcfg.ema_beta, &outg);
  if (tcfg.balancing == Balancing::GradReverse) ema_update(st.ema, st.live, tcfg.ema_beta, &propg);

  if (tcfg.balancing == Balancing::DomainConfusion) {
    // Pass two: the live classifier trains against the representation the
    // EMA weights produce right now, i.e. after this step's shadow update.
    zero_all_grads(st.live);
    Rng d2 = step_rng(tcfg.seed, rngtag::DropCls, epoch, step);
    Tape t2;
    auto fwd2 = model_forward(t2, st.ema, mcfg, in, /*training=*/true, &d2);
    auto phi2 = gather_rows(t2, fwd2.phi, in.valid_rows);
    auto probs2 = classify_treatment(t2, st.live.propensity, phi2);
    auto l_ga = propensity_loss(t2, probs2, in.a_cur);
    tr.l_ga = l_ga->at(0, 0);
    tr.propensity_repr_source = fwd2.repr_source;
    backward(t2, l_ga);
    st.opt_propensity.step();
    ema_update(st.ema, st.live, tcfg.ema_beta, &propg);
  }

  tr.used_ema_repr = tr.propensity_repr_source == &st.ema;
  return tr;
}

// ---------------------------------------------------------------------------
// Epoch loop

struct EpochRecord {
  long epoch = 0;
  double l_gy = std::numeric_limits<double>::quiet_NaN();
  double l_ga = std::numeric_limits<double>::quiet_NaN();
  double l_conf = std::numeric_limits<double>::quiet_NaN();
  double alpha_e = 0.0;  // schedule value used (confusion weight, or lambda)
  double val_rmse = std::numeric_limits<double>::quiet_NaN();
};

// Factual one-step RMSE in unscaled outcome units: full-visibility forward,
// outcome head fed the factual treatments.
inline double factual_rmse(const ModelParams& params, const ModelConfig& mcfg,
                           const std::vector<Trajectory>& scaled, const Scaler& sc,
                           long chunk = 64) {
  double se = 0.0;
  long n = 0;
  for (size_t at = 0; at < scaled.size(); at += chunk) {
    size_t hi = std::min(scaled.size(), at + chunk);
    std::vector<const Trajectory*> ptrs;
    for (size_t i = at; i < hi; ++i) ptrs.push_back(&scaled[i]);
    std::vector<long> cov(ptrs.size(), mcfg.t_len);
    auto in = make_input(mcfg, ptrs, mcfg.t_len, cov);
    Tape tape;
    tape.recording = false;
    auto fwd = model_forward(tape, params, mcfg, in, /*training=*/false);
    auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
    auto y_hat = predict_outcome(tape, params.outcome, phi_sel, in.a_cur);
    for (long r = 0; r < y_hat->rows(); ++r)
      for (long j = 0; j < y_hat->cols(); ++j) {
        double err = (y_hat->at(r, j) - in.y_next->at(r, j)) * sc.y_sd[j];
        se += err * err;
        ++n;
      }
  }
  if (n == 0) throw std::invalid_argument("factual_rmse: no prediction targets");
  return std::sqrt(se / static_cast<double>(n));
}

// Appends one duplicate of every sample already in the minibatch, each with
// a uniformly drawn covariate cutoff: the duplicate sees its covariates only
// up to cov_visible in {0, ..., t_len-1}. Originals stay fully visible and
// keep their position at the front.
inline void augment_minibatch(std::vector<const Trajectory*>& ptrs, std::vector<long>& cov,
                              long t_len, Rng& rng) {
  size_t base = ptrs.size();
  for (size_t i = 0; i < base; ++i) {
    ptrs.push_back(ptrs[i]);
    cov.push_back(t_len - (1 + rng.uniform_int(t_len)));
  }
}

// Full training loop over scaled trajectories. Augmentation appends, after
// the originals of each minibatch, one duplicate per sample with a uniform
// covariate cutoff in {0, ..., t_len-1}.
inline std::vector<EpochRecord> train(
    TrainState& st, const ModelConfig& mcfg, const TrainConfig& tcfg,
    const std::vector<Trajectory>& train_scaled, const std::vector<Trajectory>& val_scaled,
    const Scaler& scaler, const std::function<void(const EpochRecord&)>& on_epoch = nullptr) {
  if (train_scaled.empty()) throw std::invalid_argument("train: empty training set");
  long n = static_cast<long>(train_scaled.size());
  std::vector<EpochRecord> log;

  for (long e = 1; e <= tcfg.epochs; ++e) {
    double alpha_e = tcfg.balancing == Balancing::DomainConfusion
                         ? alpha_rise(e, tcfg.epochs, tcfg.alpha)
                         : 0.0;
    double lambda_e =
        tcfg.balancing == Balancing::GradReverse ? alpha_rise(e, tcfg.epochs, 1.0) : 0.0;

    std::vector<long> order(n);
    for (long i = 0; i < n; ++i) order[i] = i;
    Rng shuf = step_rng(tcfg.seed, rngtag::Shuffle, e, 0);
    for (long i = n - 1; i > 0; --i) {
      long j = shuf.uniform_int(i + 1);
      std::swap(order[i], order[j]);
    }
    Rng aug = step_rng(tcfg.seed, rngtag::Augment, e, 0);

    double gy_sum = 0.0, ga_sum = 0.0, conf_sum = 0.0;
    long gy_n = 0, ga_n = 0, conf_n = 0;
    long step = 0;
    for (long at = 0; at < n; at += tcfg.batch_size, ++step) {
      long hi = std::min(n, at + tcfg.batch_size);
      std::vector<const Trajectory*> ptrs;
      std::vector<long> cov;
      for (long i = at; i < hi; ++i) {
        ptrs.push_back(&train_scaled[order[i]]);
        cov.push_back(mcfg.t_len);
      }
      if (tcfg.augment) augment_minibatch(ptrs, cov, mcfg.t_len, aug);
      auto in = make_input(mcfg, ptrs, mcfg.t_len, cov);
      auto trw = adversarial_step(st, mcfg, tcfg, in, alpha_e, lambda_e, e, step);
      if (std::isfinite(trw.l_gy)) {
        gy_sum += trw.l_gy * trw.n_valid;
        gy_n += trw.n_valid;
      }
      if (std::isfinite(trw.l_ga)) {
        ga_sum += trw.l_ga * trw.n_valid;
        ga_n += trw.n_valid;
      }
      if (std::isfinite(trw.l_conf)) {
        conf_sum += trw.l_conf * trw.n_valid;
        conf_n += trw.n_valid;
      }
    }

    EpochRecord rec;
    rec.epoch = e;
    rec.l_gy = gy_n ? gy_sum / gy_n : std::numeric_limits<double>::quiet_NaN();
    rec.l_ga = ga_n ? ga_sum / ga_n : std::numeric_limits<double>::quiet_NaN();
    rec.l_conf = conf_n ? conf_sum / conf_n : std::numeric_limits<double>::quiet_NaN();
    rec.alpha_e = tcfg.balancing == Balancing::GradReverse ? lambda_e : alpha_e;
    rec.val_rmse = val_scaled.empty() ? std::numeric_limits<double>::quiet_NaN()
                                      : factual_rmse(st.ema, mcfg, val_scaled, scaler);
    st.epoch = e;
    log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Discrete checks of the confusion theory

// Bayes-optimal classifier at a point: class probabilities proportional to
// marginal frequency times class-conditional density.
inline std::vector<double> optimal_classifier(const std::vector<double>& alphas,
                                              const std::vector<double>& densities) {
  if (alphas.size() != densities.size() || alphas.empty())
    throw std::invalid_argument("optimal_classifier: size mismatch");
  double denom = 0.0;
  for (size_t j = 0; j < alphas.size(); ++j) {
    if (alphas[j] < 0.0 || densities[j] < 0.0)
      throw std::invalid_argument("optimal_classifier: negative input");
    denom += alphas[j] * densities[j];
  }
  if (denom <= 0.0) throw std::invalid_argument("optimal_classifier: zero total density");
  std::vector<double> g(alphas.size());
  for (size_t j = 0; j < alphas.size(); ++j) g[j] = alphas[j] * densities[j] / denom;
  return g;
}

struct KlBalance {
  double value = 0.0;
  bool support_violation = false;
};

// Sum over classes of KL(mixture || class-conditional) for distributions on
// a shared finite support. A class assigning zero mass where the mixture has
// some makes the sum infinite; the flag records it.
inline KlBalance balance_kl_sum(const std::vector<double>& alphas,
                                const std::vector<std::vector<double>>& dists) {
  if (alphas.size() != dists.size() || alphas.empty())
    throw std::invalid_argument("balance_kl_sum: size mismatch");
  size_t support = dists[0].size();
  for (auto& d : dists)
    if (d.size() != support) throw std::invalid_argument("balance_kl_sum: ragged support");
  std::vector<double> mix(support, 0.0);
  for (size_t j = 0; j < dists.size(); ++j)
    for (size_t x = 0; x < support; ++x) mix[x] += alphas[j] * dists[j][x];
  KlBalance out;
  for (size_t j = 0; j < dists.size(); ++j)
    for (size_t x = 0; x < support; ++x) {
      if (mix[x] <= 0.0) continue;
      if (dists[j][x] <= 0.0) {
        out.value = std::numeric_limits<double>::infinity();
        out.support_violation = true;
        return out;
      }
      out.value += mix[x] * std::log(mix[x] / dists[j][x]);
    }
  return out;
}

}  // namespace cfseq
