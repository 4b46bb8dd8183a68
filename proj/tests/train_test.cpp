// Training-loop tests: loss arithmetic against hand values, optimizer and
// EMA identities, the rise schedule, gradient partitioning between the three
// parameter groups, a bitwise replay of one full adversarial step, and the
// exactness guarantees (alpha = 0 equals supervised training bit for bit,
// beta = 0 keeps the shadows identical to the live weights).

#include "cfseq/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"

using namespace cfseq;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.t_len = 4;
  cfg.d_x = 1;
  cfg.d_a = 2;
  cfg.d_y = 1;
  cfg.d_v = 1;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.l_max = 2;
  cfg.dropout = 0.1;
  return cfg;
}

Trajectory random_traj(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  Trajectory t;
  t.x.resize(cfg.t_len * cfg.d_x);
  t.y.resize(cfg.t_len * cfg.d_y);
  t.a.resize(cfg.t_len);
  t.v.resize(cfg.d_v);
  for (auto& v : t.x) v = rng.normal() * 0.5;
  for (auto& v : t.y) v = rng.normal() * 0.5;
  for (auto& a : t.a) a = rng.uniform_int(cfg.d_a);
  for (auto& v : t.v) v = rng.normal() * 0.5;
  return t;
}

// y[t+1] follows y[t] and the treatment, covariate mirrors the outcome, and
// the treatment choice depends on the current outcome (confounding).
std::vector<Trajectory> synthetic_set(const ModelConfig& cfg, long n, uint64_t seed) {
  Rng rng(seed);
  std::vector<Trajectory> out;
  for (long i = 0; i < n; ++i) {
    Trajectory t;
    t.x.resize(cfg.t_len);
    t.y.resize(cfg.t_len);
    t.a.resize(cfg.t_len);
    t.v = {rng.normal()};
    double y = rng.normal();
    for (long s = 0; s < cfg.t_len; ++s) {
      t.y[s] = y;
      t.x[s] = y + 0.1 * rng.normal();
      long a = (y + 0.3 * rng.normal()) > 0.0 ? 1 : 0;
      t.a[s] = a;
      y = 0.5 * y - 0.7 * a + 0.35 + 0.05 * rng.normal();
    }
    out.push_back(std::move(t));
  }
  return out;
}

bool group_equal(const ModelParams& a, const ModelParams& b, ParamGroup g) {
  auto na = named_params(a);
  auto nb = named_params(b);
  if (na.size() != nb.size()) return false;
  for (size_t i = 0; i < na.size(); ++i) {
    if (na[i].group != g) continue;
    if (na[i].t->data != nb[i].t->data) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses and schedule

TEST(Losses, OutcomeLossIsMeanSquaredError) {
  Tape tape;
  auto y_hat = tensor_of(2, 1, {3.0, 2.0});
  auto y = tensor_of(2, 1, {2.0, 0.0});
  auto l = outcome_loss(tape, y_hat, y);
  EXPECT_DOUBLE_EQ(l->at(0, 0), 2.5);  // (1^2 + 2^2) / 2
  EXPECT_THROW(outcome_loss(tape, y_hat, tensor(1, 1)), std::invalid_argument);
}

TEST(Losses, PropensityLossIsCrossEntropy) {
  Tape tape;
  auto probs = tensor_of(2, 4, {0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25});
  auto onehot = tensor_of(2, 4, {1, 0, 0, 0, 0, 0, 1, 0});
  auto l = propensity_loss(tape, probs, onehot);
  EXPECT_NEAR(l->at(0, 0), std::log(4.0), 1e-12);

  // The floor keeps a zero-probability target finite: -log(1e-12).
  auto p0 = tensor_of(1, 2, {1.0, 0.0});
  auto h0 = tensor_of(1, 2, {0.0, 1.0});
  auto lf = propensity_loss(tape, p0, h0);
  EXPECT_NEAR(lf->at(0, 0), -std::log(1e-12), 1e-9);
}

TEST(Losses, ConfusionLossAveragesAllClasses) {
  Tape tape;
  auto probs = tensor_of(1, 2, {0.9, 0.1});
  auto l = confusion_loss(tape, probs);
  EXPECT_NEAR(l->at(0, 0), -(std::log(0.9) + std::log(0.1)) / 2.0, 1e-12);

  // Uniform output minimizes it at log(d_a).
  auto uni = tensor_of(1, 4, {0.25, 0.25, 0.25, 0.25});
  EXPECT_NEAR(confusion_loss(tape, uni)->at(0, 0), std::log(4.0), 1e-12);
}

TEST(Schedule, AlphaRiseEndpointsAndMonotonicity) {
  EXPECT_EQ(alpha_rise(0, 40, 0.01), 0.0);  // exact zero before training
  EXPECT_EQ(alpha_rise(5, 40, 0.0), 0.0);
  EXPECT_GT(alpha_rise(1, 40, 0.01), 0.0);
  EXPECT_NEAR(alpha_rise(40, 40, 0.01), 0.0099991, 1e-7);
  double prev = 0.0;
  for (long e = 1; e <= 40; ++e) {
    double a = alpha_rise(e, 40, 0.01);
    EXPECT_GT(a, prev);
    prev = a;
  }
  EXPECT_NEAR(alpha_rise(20, 40, 0.01), 0.01 * (2.0 / (1.0 + std::exp(-5.0)) - 1.0), 1e-15);
}

// ---------------------------------------------------------------------------
// Optimizer and EMA

TEST(AdamOpt, MatchesHandComputedSteps) {
  auto p = tensor(1, 1, true);
  p->data[0] = 1.0;
  Adam opt({p}, 0.1);

  // Three steps with constant gradient 0.5, checked against the textbook
  // recurrences evaluated independently.
  double m = 0.0, v = 0.0, ref = 1.0;
  for (long t = 1; t <= 3; ++t) {
    p->ensure_grad();
    p->grad[0] = 0.5;
    opt.step();
    m = 0.9 * m + 0.1 * 0.5;
    v = 0.999 * v + 0.001 * 0.25;
    double mhat = m / (1.0 - std::pow(0.9, t));
    double vhat = v / (1.0 - std::pow(0.999, t));
    ref -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_DOUBLE_EQ(p->data[0], ref) << "step " << t;
  }
  EXPECT_EQ(opt.steps_taken(), 3);
}

TEST(AdamOpt, ZeroLearningRateIsExactNoOp) {
  auto p = tensor(2, 2, true);
  for (long i = 0; i < 4; ++i) p->data[i] = 1.5 + i;
  Adam opt({p}, 0.0);
  p->ensure_grad();
  for (auto& g : p->grad) g = 7.0;
  auto before = p->data;
  opt.step();
  opt.step();
  EXPECT_EQ(p->data, before);
  EXPECT_EQ(opt.steps_taken(), 0);
}

TEST(AdamOpt, SkipsFrozenTensors) {
  auto p = tensor(1, 2, false);
  p->data = {3.0, 4.0};
  Adam opt({p}, 0.5);
  opt.step();
  EXPECT_EQ(p->data[0], 3.0);
  EXPECT_EQ(p->data[1], 4.0);
}

TEST(Ema, BetaZeroCopiesAndGeometricDecayMatchesClosedForm) {
  auto cfg = tiny_cfg();
  auto live = init_params(cfg, 5);
  auto shadow = clone_params(live, false);

  // Drive one live tensor to a constant and iterate: after k updates from a
  // zeroed shadow the value is (1 - beta^k) * L.
  auto nl = named_params(live);
  auto ns = named_params(shadow);
  for (auto& v : nl[0].t->data) v = 2.0;
  for (auto& v : ns[0].t->data) v = 0.0;
  double beta = 0.8;
  for (int k = 0; k < 5; ++k) ema_update(shadow, live, beta);
  double expect = (1.0 - std::pow(0.8, 5)) * 2.0;
  for (double v : ns[0].t->data) EXPECT_NEAR(v, expect, 1e-12);

  // beta = 0 is an exact copy.
  ema_update(shadow, live, 0.0);
  for (size_t i = 0; i < nl.size(); ++i) EXPECT_EQ(ns[i].t->data, nl[i].t->data) << nl[i].name;

  // Group filtering leaves the other groups untouched.
  auto live2 = init_params(cfg, 6);
  auto shadow2 = clone_params(live2, false);
  for (auto& np : named_params(live2)) np.t->data[0] += 1.0;
  ParamGroup only = ParamGroup::OutcomeHead;
  ema_update(shadow2, live2, 0.0, &only);
  EXPECT_TRUE(group_equal(shadow2, live2, ParamGroup::OutcomeHead));
  EXPECT_FALSE(group_equal(shadow2, live2, ParamGroup::Repr));
  EXPECT_FALSE(group_equal(shadow2, live2, ParamGroup::PropensityHead));
}

// ---------------------------------------------------------------------------
// Gradient partition between the three groups

TEST(GradientPartition, LossesTouchOnlyTheirGroups) {
  auto cfg = tiny_cfg();
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 9);
  auto ema = clone_params(params, false);
  auto tr = random_traj(cfg, 2);
  auto in = make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len});

  auto nonzero = [](const TensorPtr& t) {
    if (t->grad.empty()) return false;
    for (double g : t->grad)
      if (g != 0.0) return true;
    return false;
  };

  // Outcome loss: gradients reach the outcome head and the representation,
  // never the classifier.
  {
    zero_all_grads(params);
    Tape tape;
    auto fwd = model_forward(tape, params, cfg, in, false);
    auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
    auto y_hat = predict_outcome(tape, params.outcome, phi_sel, in.a_cur);
    backward(tape, outcome_loss(tape, y_hat, in.y_next));
    EXPECT_TRUE(nonzero(params.outcome.w1));
    EXPECT_TRUE(nonzero(params.phi.w));
    EXPECT_FALSE(nonzero(params.propensity.w1));
    EXPECT_FALSE(nonzero(params.propensity.w2));
  }

  // Classification loss via the live head: gradients reach the classifier
  // and the representation, never the outcome head.
  {
    zero_all_grads(params);
    Tape tape;
    auto fwd = model_forward(tape, params, cfg, in, false);
    auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
    auto probs = classify_treatment(tape, params.propensity, phi_sel);
    backward(tape, propensity_loss(tape, probs, in.a_cur));
    EXPECT_TRUE(nonzero(params.propensity.w1));
    EXPECT_TRUE(nonzero(params.phi.w));
    EXPECT_FALSE(nonzero(params.outcome.w1));
    EXPECT_FALSE(nonzero(params.outcome.w2));
  }

  // Confusion pass with the frozen EMA classifier: the live classifier gets
  // nothing, the representation still learns to confuse.
  {
    zero_all_grads(params);
    Tape tape;
    auto fwd = model_forward(tape, params, cfg, in, false);
    auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
    auto probs = classify_treatment(tape, ema.propensity, phi_sel);
    backward(tape, confusion_loss(tape, probs));
    EXPECT_TRUE(nonzero(params.phi.w));
    EXPECT_FALSE(nonzero(params.propensity.w1));
    EXPECT_TRUE(ema.propensity.w1->grad.empty());
  }

  // Classifier pass over the frozen EMA representation: only the live
  // classifier learns, the live representation stays untouched.
  {
    zero_all_grads(params);
    Tape tape;
    auto fwd = model_forward(tape, ema, cfg, in, false);
    auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
    auto probs = classify_treatment(tape, params.propensity, phi_sel);
    backward(tape, propensity_loss(tape, probs, in.a_cur));
    EXPECT_TRUE(nonzero(params.propensity.w1));
    EXPECT_FALSE(nonzero(params.phi.w));
    EXPECT_FALSE(nonzero(params.outcome.w1));
  }
}

// ---------------------------------------------------------------------------
// One full adversarial step, replayed by hand

TEST(AdversarialStep, DomainConfusionStepMatchesManualReplayBitwise) {
  auto cfg = tiny_cfg();
  TrainConfig tcfg;
  tcfg.lr = 0.02;
  tcfg.ema_beta = 0.9;
  tcfg.seed = 77;
  auto st = init_train(cfg, tcfg);
  auto st2 = init_train(cfg, tcfg);

  auto t1 = random_traj(cfg, 21);
  auto t2 = random_traj(cfg, 22);
  auto in = make_input(cfg, {&t1, &t2}, cfg.t_len, {cfg.t_len, 2});
  double alpha_e = 0.007;

  auto trace = adversarial_step(st, cfg, tcfg, in, alpha_e, 0.0, 3, 5);

  // Replay the documented order with the library pieces directly.
  zero_all_grads(st2.live);
  Rng d1 = step_rng(tcfg.seed, rngtag::DropMain, 3, 5);
  Tape tape;
  auto fwd = model_forward(tape, st2.live, cfg, in, true, &d1);
  auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
  auto y_hat = predict_outcome(tape, st2.live.outcome, phi_sel, in.a_cur);
  auto l_gy = outcome_loss(tape, y_hat, in.y_next);
  auto probs = classify_treatment(tape, st2.ema.propensity, phi_sel);
  auto l_conf = confusion_loss(tape, probs);
  backward(tape, add(tape, l_gy, scale(tape, l_conf, alpha_e)));
  st2.opt_outcome.step();
  st2.opt_repr.step();
  ParamGroup repr = ParamGroup::Repr, outg = ParamGroup::OutcomeHead,
             propg = ParamGroup::PropensityHead;
  ema_update(st2.ema, st2.live, tcfg.ema_beta, &repr);
  ema_update(st2.ema, st2.live, tcfg.ema_beta, &outg);

  zero_all_grads(st2.live);
  Rng d2 = step_rng(tcfg.seed, rngtag::DropCls, 3, 5);
  Tape tp2;
  auto fwd2 = model_forward(tp2, st2.ema, cfg, in, true, &d2);
  auto phi2 = gather_rows(tp2, fwd2.phi, in.valid_rows);
  auto probs2 = classify_treatment(tp2, st2.live.propensity, phi2);
  auto l_ga = propensity_loss(tp2, probs2, in.a_cur);
  backward(tp2, l_ga);
  st2.opt_propensity.step();
  ema_update(st2.ema, st2.live, tcfg.ema_beta, &propg);

  // Bitwise identical parameters, live and shadow, plus matching loss values.
  auto a_live = named_params(st.live), b_live = named_params(st2.live);
  auto a_ema = named_params(st.ema), b_ema = named_params(st2.ema);
  for (size_t i = 0; i < a_live.size(); ++i)
    EXPECT_EQ(a_live[i].t->data, b_live[i].t->data) << a_live[i].name;
  for (size_t i = 0; i < a_ema.size(); ++i)
    EXPECT_EQ(a_ema[i].t->data, b_ema[i].t->data) << a_ema[i].name;
  EXPECT_EQ(trace.l_gy, l_gy->at(0, 0));
  EXPECT_EQ(trace.l_conf, l_conf->at(0, 0));
  EXPECT_EQ(trace.l_ga, l_ga->at(0, 0));
  EXPECT_EQ(trace.n_valid, static_cast<long>(in.valid_rows.size()));
}

TEST(AdversarialStep, InstrumentationReportsRepresentationSource) {
  auto cfg = tiny_cfg();
  auto t1 = random_traj(cfg, 31);
  auto in = make_input(cfg, {&t1}, cfg.t_len, {cfg.t_len});

  {
    TrainConfig tcfg;
    tcfg.balancing = Balancing::DomainConfusion;
    auto st = init_train(cfg, tcfg);
    auto tr = adversarial_step(st, cfg, tcfg, in, 0.005, 0.0, 1, 0);
    EXPECT_TRUE(tr.used_ema_repr);
    EXPECT_EQ(tr.propensity_repr_source, &st.ema);
    EXPECT_TRUE(std::isfinite(tr.l_ga));
    EXPECT_TRUE(std::isfinite(tr.l_conf));
  }
  {
    TrainConfig tcfg;
    tcfg.balancing = Balancing::GradReverse;
    auto st = init_train(cfg, tcfg);
    auto tr = adversarial_step(st, cfg, tcfg, in, 0.0, 0.4, 1, 0);
    EXPECT_FALSE(tr.used_ema_repr);
    EXPECT_EQ(tr.propensity_repr_source, &st.live);
    EXPECT_TRUE(std::isfinite(tr.l_ga));
    EXPECT_TRUE(std::isnan(tr.l_conf));
  }
  {
    TrainConfig tcfg;
    tcfg.balancing = Balancing::None;
    auto st = init_train(cfg, tcfg);
    auto tr = adversarial_step(st, cfg, tcfg, in, 0.0, 0.0, 1, 0);
    EXPECT_FALSE(tr.used_ema_repr);
    EXPECT_EQ(tr.propensity_repr_source, nullptr);
    EXPECT_TRUE(std::isnan(tr.l_ga));
    EXPECT_TRUE(std::isnan(tr.l_conf));
    EXPECT_TRUE(std::isfinite(tr.l_gy));
  }
}

// ---------------------------------------------------------------------------
// Exactness guarantees across whole training runs

TEST(Training, AlphaZeroConfusionMatchesSupervisedBitwise) {
  auto cfg = tiny_cfg();
  auto data = synthetic_set(cfg, 6, 41);
  auto scaler = fit_scaler(data, cfg.d_x, cfg.d_y, cfg.d_v);
  auto scaled = scale_trajectories(data, scaler);

  TrainConfig a;
  a.balancing = Balancing::DomainConfusion;
  a.alpha = 0.0;
  a.epochs = 2;
  a.batch_size = 3;
  a.seed = 11;
  TrainConfig b = a;
  b.balancing = Balancing::None;

  auto sa = init_train(cfg, a);
  auto sb = init_train(cfg, b);
  train(sa, cfg, a, scaled, {}, scaler);
  train(sb, cfg, b, scaled, {}, scaler);

  // Representation and outcome head evolve identically; the classifier only
  // trains under domain confusion, so it must differ.
  EXPECT_TRUE(group_equal(sa.live, sb.live, ParamGroup::Repr));
  EXPECT_TRUE(group_equal(sa.live, sb.live, ParamGroup::OutcomeHead));
  EXPECT_TRUE(group_equal(sa.ema, sb.ema, ParamGroup::Repr));
  EXPECT_TRUE(group_equal(sa.ema, sb.ema, ParamGroup::OutcomeHead));
  EXPECT_FALSE(group_equal(sa.live, sb.live, ParamGroup::PropensityHead));
}

TEST(Training, BetaZeroKeepsShadowEqualToLive) {
  auto cfg = tiny_cfg();
  auto data = synthetic_set(cfg, 4, 43);
  auto scaler = fit_scaler(data, cfg.d_x, cfg.d_y, cfg.d_v);
  auto scaled = scale_trajectories(data, scaler);

  TrainConfig tcfg;
  tcfg.ema_beta = 0.0;
  tcfg.epochs = 1;
  tcfg.batch_size = 2;
  auto st = init_train(cfg, tcfg);
  train(st, cfg, tcfg, scaled, {}, scaler);
  auto nl = named_params(st.live);
  auto ns = named_params(st.ema);
  for (size_t i = 0; i < nl.size(); ++i) EXPECT_EQ(nl[i].t->data, ns[i].t->data) << nl[i].name;
}

TEST(Training, RerunsAreDeterministic) {
  auto cfg = tiny_cfg();
  auto data = synthetic_set(cfg, 5, 47);
  auto scaler = fit_scaler(data, cfg.d_x, cfg.d_y, cfg.d_v);
  auto scaled = scale_trajectories(data, scaler);
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 2;

  auto s1 = init_train(cfg, tcfg);
  auto s2 = init_train(cfg, tcfg);
  auto log1 = train(s1, cfg, tcfg, scaled, scaled, scaler);
  auto log2 = train(s2, cfg, tcfg, scaled, scaled, scaler);
  ASSERT_EQ(log1.size(), log2.size());
  for (size_t i = 0; i < log1.size(); ++i) {
    EXPECT_EQ(log1[i].l_gy, log2[i].l_gy);
    EXPECT_EQ(log1[i].val_rmse, log2[i].val_rmse);
  }
  auto n1 = named_params(s1.live);
  auto n2 = named_params(s2.live);
  for (size_t i = 0; i < n1.size(); ++i) EXPECT_EQ(n1[i].t->data, n2[i].t->data);
}

TEST(Training, LossDecreasesOnLearnableSyntheticData) {
  auto cfg = tiny_cfg();
  cfg.t_len = 6;
  auto data = synthetic_set(cfg, 24, 53);
  auto val = synthetic_set(cfg, 8, 54);
  auto scaler = fit_scaler(data, cfg.d_x, cfg.d_y, cfg.d_v);
  auto scaled = scale_trajectories(data, scaler);
  auto val_scaled = scale_trajectories(val, scaler);

  TrainConfig tcfg;
  tcfg.epochs = 12;
  tcfg.batch_size = 8;
  tcfg.lr = 0.02;
  tcfg.seed = 3;
  auto st = init_train(cfg, tcfg);
  auto log = train(st, cfg, tcfg, scaled, val_scaled, scaler);

  ASSERT_EQ(log.size(), 12u);
  EXPECT_LT(log.back().l_gy, 0.5 * log.front().l_gy);
  EXPECT_TRUE(std::isfinite(log.back().val_rmse));
  EXPECT_LT(log.back().val_rmse, log.front().val_rmse);
  EXPECT_GT(log.back().alpha_e, log.front().alpha_e);
  for (auto& r : log) {
    EXPECT_TRUE(std::isfinite(r.l_gy));
    EXPECT_TRUE(std::isfinite(r.l_ga));
    EXPECT_TRUE(std::isfinite(r.l_conf));
  }
}

TEST(Training, AugmentationAppendsDuplicatesWithCutoffs) {
  auto cfg = tiny_cfg();
  auto t1 = random_traj(cfg, 61);
  auto t2 = random_traj(cfg, 62);
  std::vector<const Trajectory*> ptrs = {&t1, &t2};
  std::vector<long> cov = {cfg.t_len, cfg.t_len};
  Rng rng(5);
  augment_minibatch(ptrs, cov, cfg.t_len, rng);

  ASSERT_EQ(ptrs.size(), 4u);
  EXPECT_EQ(ptrs[2], &t1);
  EXPECT_EQ(ptrs[3], &t2);
  EXPECT_EQ(cov[0], cfg.t_len);
  EXPECT_EQ(cov[1], cfg.t_len);
  for (int i = 2; i < 4; ++i) {
    EXPECT_GE(cov[i], 0);
    EXPECT_LT(cov[i], cfg.t_len);
  }

  // Cutoffs cover the whole range {0..t_len-1} across many draws.
  std::vector<int> seen(cfg.t_len, 0);
  Rng rng2(6);
  for (int k = 0; k < 500; ++k) {
    std::vector<const Trajectory*> p = {&t1};
    std::vector<long> c = {cfg.t_len};
    augment_minibatch(p, c, cfg.t_len, rng2);
    ++seen[c[1]];
  }
  for (long m = 0; m < cfg.t_len; ++m) EXPECT_GT(seen[m], 0) << m;
}

// ---------------------------------------------------------------------------
// Discrete confusion theory

TEST(Theory, OptimalClassifierMatchesHandExample) {
  auto g = optimal_classifier({0.3, 0.7}, {2.0, 1.0});
  ASSERT_EQ(g.size(), 2u);
  EXPECT_NEAR(g[0], 0.6 / 1.3, 1e-15);
  EXPECT_NEAR(g[1], 0.7 / 1.3, 1e-15);
  EXPECT_NEAR(g[0] + g[1], 1.0, 1e-15);

  // Equal densities recover the marginals regardless of the point.
  auto m = optimal_classifier({0.1, 0.2, 0.7}, {3.0, 3.0, 3.0});
  EXPECT_NEAR(m[0], 0.1, 1e-15);
  EXPECT_NEAR(m[2], 0.7, 1e-15);
  EXPECT_THROW(optimal_classifier({1.0}, {0.0}), std::invalid_argument);
}

TEST(Theory, BalanceKlSumZeroIffDistributionsMatchMixture) {
  // Identical class-conditionals: mixture equals each, sum is exactly zero.
  auto z = balance_kl_sum({0.4, 0.6}, {{0.5, 0.5}, {0.5, 0.5}});
  EXPECT_EQ(z.value, 0.0);
  EXPECT_FALSE(z.support_violation);

  // Hand-computed two-class example.
  std::vector<double> p1 = {0.5, 0.5}, p2 = {0.25, 0.75};
  auto r = balance_kl_sum({0.5, 0.5}, {p1, p2});
  double m0 = 0.375, m1 = 0.625;
  double expect = m0 * std::log(m0 / p1[0]) + m1 * std::log(m1 / p1[1]) +
                  m0 * std::log(m0 / p2[0]) + m1 * std::log(m1 / p2[1]);
  EXPECT_NEAR(r.value, expect, 1e-15);
  EXPECT_GT(r.value, 0.0);

  // A class missing mass where the mixture has support blows up.
  auto v = balance_kl_sum({0.5, 0.5}, {{1.0, 0.0}, {0.5, 0.5}});
  EXPECT_TRUE(v.support_violation);
  EXPECT_TRUE(std::isinf(v.value));
}

TEST(FactualRmse, MatchesDirectRecomputation) {
  auto cfg = tiny_cfg();
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 71);
  auto data = synthetic_set(cfg, 5, 72);
  auto scaler = fit_scaler(data, cfg.d_x, cfg.d_y, cfg.d_v);
  auto scaled = scale_trajectories(data, scaler);

  double got = factual_rmse(params, cfg, scaled, scaler, 2);  // forces chunking

  double se = 0.0;
  long n = 0;
  for (auto& t : scaled) {
    auto in = make_input(cfg, {&t}, cfg.t_len, {cfg.t_len});
    Tape tape;
    tape.recording = false;
    auto fwd = model_forward(tape, params, cfg, in, false);
    auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
    auto y_hat = predict_outcome(tape, params.outcome, phi_sel, in.a_cur);
    for (long r = 0; r < y_hat->rows(); ++r) {
      double err = (y_hat->at(r, 0) - in.y_next->at(r, 0)) * scaler.y_sd[0];
      se += err * err;
      ++n;
    }
  }
  EXPECT_NEAR(got, std::sqrt(se / n), 1e-12);
}
