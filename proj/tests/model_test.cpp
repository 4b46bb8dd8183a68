// Model wiring tests. The central oracle recomputes a full forward pass with
// naive standalone loops (no tape, no attention bucketing) and demands
// agreement to 1e-12; the rest pin structural properties: registry layout,
// input construction, causal and covariate-visibility guarantees, gradient
// correctness against finite differences, and rollout bookkeeping.

#include "cfseq/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cfseq/data.hpp"
#include "test_util.hpp"

using namespace cfseq;

namespace {

std::map<std::string, TensorPtr> param_map(const ModelParams& p) {
  std::map<std::string, TensorPtr> m;
  for (auto& np : named_params(p)) m[np.name] = np.t;
  return m;
}

// Spread parameter values out so layer norms and softmaxes see non-trivial
// inputs (fresh inits keep gammas at exactly 1 and biases at 0).
void jitter_params(ModelParams& p, uint64_t seed, double s = 0.3) {
  Rng rng(seed);
  for (auto& np : named_params(p))
    for (auto& v : np.t->data) v += (2.0 * rng.uniform() - 1.0) * s;
}

Trajectory make_traj(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  Trajectory t;
  t.x.resize(cfg.t_len * cfg.d_x);
  t.y.resize(cfg.t_len * cfg.d_y);
  t.a.resize(cfg.t_len);
  t.v.resize(cfg.d_v);
  for (auto& v : t.x) v = rng.normal() * 0.7;
  for (auto& v : t.y) v = rng.normal() * 0.7;
  for (auto& a : t.a) a = rng.uniform_int(cfg.d_a);
  for (auto& v : t.v) v = rng.normal() * 0.7;
  return t;
}

// ---------------------------------------------------------------------------
// Independent forward oracle: plain row-major double vectors, explicit loops.

using Vec = std::vector<double>;

Vec o_affine(const Vec& x, long rows, long din, const Tensor& w, const Tensor& b) {
  long dout = w.cols();
  Vec out(rows * dout, 0.0);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < dout; ++c) {
      double acc = b.at(0, c);
      for (long k = 0; k < din; ++k) acc += x[r * din + k] * w.at(k, c);
      out[r * dout + c] = acc;
    }
  return out;
}

Vec o_ln(const Vec& x, long rows, long d, const Tensor& g, const Tensor& b, double eps = 1e-5) {
  Vec out(x.size());
  for (long r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (long j = 0; j < d; ++j) mean += x[r * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) {
      double c = x[r * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double istd = 1.0 / std::sqrt(var + eps);
    for (long j = 0; j < d; ++j)
      out[r * d + j] = g.at(0, j) * (x[r * d + j] - mean) * istd + b.at(0, j);
  }
  return out;
}

Vec o_add(const Vec& a, const Vec& b) {
  Vec out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vec o_elu(Vec x) {
  for (auto& v : x) v = v > 0.0 ? v : std::expm1(v);
  return x;
}
Vec o_relu(Vec x) {
  for (auto& v : x) v = v > 0.0 ? v : 0.0;
  return x;
}

// Masked relative attention straight from the definition, one head.
Vec o_attention(const Vec& hq, const Vec& hkv, long t_len, long d_h, const HeadParams& hp,
                const RelPosTable& pe, const AttentionMask& mask) {
  long dq = hp.w_q->cols();
  Vec q = o_affine(hq, t_len, d_h, *hp.w_q, *hp.b_q);
  Vec k = o_affine(hkv, t_len, d_h, *hp.w_k, *hp.b_k);
  Vec v = o_affine(hkv, t_len, d_h, *hp.w_v, *hp.b_v);
  Vec out(t_len * dq, 0.0);
  double inv = 1.0 / std::sqrt(static_cast<double>(dq));
  for (long i = 0; i < t_len; ++i) {
    Vec logit(t_len, 0.0);
    std::vector<char> ok(t_len, 0);
    double denom = 0.0;
    for (long j = 0; j <= i; ++j) {
      if (!mask.allowed(i, j)) continue;
      long dist = std::min(i - j, pe.l_max);
      double acc = 0.0;
      for (long c = 0; c < dq; ++c)
        acc += q[i * dq + c] * (k[j * dq + c] + pe.keys->at(dist, c));
      logit[j] = acc * inv;
      ok[j] = 1;
    }
    for (long j = 0; j <= i; ++j)
      if (ok[j]) denom += std::exp(logit[j]);
    for (long j = 0; j <= i; ++j) {
      if (!ok[j]) continue;
      double alpha = std::exp(logit[j]) / denom;
      long dist = std::min(i - j, pe.l_max);
      for (long c = 0; c < dq; ++c)
        out[i * dq + c] += alpha * (v[j * dq + c] + pe.values->at(dist, c));
    }
  }
  return out;
}

// Multi-head: concatenate per-head outputs in head order.
Vec o_mha(const Vec& hq, const Vec& hkv, long t_len, long d_h, const AttnParams& ap,
          const RelPosTable& pe, const AttentionMask& mask) {
  long dq = ap.heads[0].w_q->cols();
  Vec out(t_len * d_h, 0.0);
  for (size_t h = 0; h < ap.heads.size(); ++h) {
    Vec part = o_attention(hq, hkv, t_len, d_h, ap.heads[h], pe, mask);
    for (long i = 0; i < t_len; ++i)
      for (long c = 0; c < dq; ++c) out[i * d_h + h * dq + c] = part[i * dq + c];
  }
  return out;
}

Vec o_attn_sublayer(const Vec& q_state, const Vec& kv_state, long t_len, long d_h,
                    const AttnParams& ap, const RelPosTable& pe, const AttentionMask& mask) {
  Vec att = o_mha(q_state, kv_state, t_len, d_h, ap, pe, mask);
  return o_ln(o_add(att, q_state), t_len, d_h, *ap.ln.g, *ap.ln.b);
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(ModelConfig, ReportsAllViolations) {
  ModelConfig cfg;
  cfg.t_len = 6;
  EXPECT_NO_THROW(cfg.validate());

  ModelConfig bad = cfg;
  bad.d_h = 10;
  bad.n_h = 3;  // not a divisor
  bad.dropout = 1.0;
  try {
    bad.validate();
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("divisible"), std::string::npos) << msg;
    EXPECT_NE(msg.find("dropout"), std::string::npos) << msg;
  }
}

TEST(ModelParams, RegistryStableAndGrouped) {
  ModelConfig cfg;
  cfg.t_len = 6;
  cfg.d_x = 2;
  cfg.n_blocks = 2;
  auto p = init_params(cfg, 7);
  auto names = named_params(p);

  std::map<std::string, int> seen;
  for (auto& np : names) seen[np.name]++;
  for (auto& [n, c] : seen) EXPECT_EQ(c, 1) << "duplicate name " << n;

  // Same config, same seed: identical names in identical order.
  auto p2 = init_params(cfg, 7);
  auto names2 = named_params(p2);
  ASSERT_EQ(names.size(), names2.size());
  for (size_t i = 0; i < names.size(); ++i) {
    EXPECT_EQ(names[i].name, names2[i].name);
    EXPECT_EQ(names[i].t->data, names2[i].t->data) << names[i].name;
  }

  long head_tensors = 0;
  for (auto& np : names) {
    if (np.name.rfind("head.outcome.", 0) == 0) {
      EXPECT_EQ(np.group, ParamGroup::OutcomeHead);
      ++head_tensors;
    } else if (np.name.rfind("head.propensity.", 0) == 0) {
      EXPECT_EQ(np.group, ParamGroup::PropensityHead);
      ++head_tensors;
    } else {
      EXPECT_EQ(np.group, ParamGroup::Repr) << np.name;
    }
  }
  EXPECT_EQ(head_tensors, 8);

  // Both blocks present and distinct tensors.
  ASSERT_TRUE(seen.count("block0.self.treat.head0.wq"));
  ASSERT_TRUE(seen.count("block1.self.treat.head0.wq"));
  ASSERT_TRUE(seen.count("block1.cross.out_from_treat.ln.g"));
  ASSERT_TRUE(seen.count("block1.ff.cov.w2"));
}

TEST(ModelParams, RelativeTablesSharedAndCounted) {
  ModelConfig cfg;
  cfg.t_len = 8;
  cfg.l_max = 5;
  cfg.d_h = 8;
  cfg.n_h = 2;  // d_qkv = 4
  cfg.n_blocks = 3;
  auto p = init_params(cfg, 3);

  long pe_params = 0;
  int pe_tensors = 0;
  for (auto& np : named_params(p))
    if (np.name.rfind("pe.", 0) == 0) {
      ++pe_tensors;
      EXPECT_TRUE(np.t->requires_grad);
      pe_params += np.t->rows() * np.t->cols();
    }
  EXPECT_EQ(pe_tensors, 2);
  // One shared table pair regardless of block count: 2 * (l_max+1) * d_qkv.
  EXPECT_EQ(pe_params, 2 * (cfg.l_max + 1) * cfg.d_qkv());

  // Every attention module uses the same table objects.
  for (auto& b : p.blocks) {
    (void)b;
    EXPECT_EQ(p.pe.keys->rows(), cfg.l_max + 1);
  }

  // Frozen-table mode keeps the tensors but removes them from the trainable
  // count; absolute mode removes the tensors entirely. Block parameters are
  // identical across the three modes.
  ModelConfig cfg_fixed = cfg;
  cfg_fixed.pe_mode = PeMode::RelativeFixed;
  ModelConfig cfg_abs = cfg;
  cfg_abs.pe_mode = PeMode::Absolute;
  auto pf = init_params(cfg_fixed, 3);
  auto pa = init_params(cfg_abs, 3);
  EXPECT_EQ(count_params(p) - pe_params, count_params(pf));
  EXPECT_EQ(count_params(pf), count_params(pa));
  EXPECT_EQ(count_params(pf, false) - count_params(pa, false), pe_params);
  for (auto& np : named_params(pa)) EXPECT_NE(np.name.rfind("pe.", 0), 0u) << np.name;
}

TEST(ModelInput, TreatmentStreamShiftAndTargets) {
  ModelConfig cfg;
  cfg.t_len = 4;
  cfg.d_x = 2;
  auto tr = make_traj(cfg, 11);
  tr.a = {2, 0, 3, 1};
  auto in = make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len});

  // Row 0 of the treatment stream is all zeros; row i holds one-hot a[i-1].
  for (long j = 0; j < cfg.d_a; ++j) EXPECT_EQ(in.a_prev->at(0, j), 0.0);
  for (long i = 1; i < cfg.t_len; ++i)
    for (long j = 0; j < cfg.d_a; ++j)
      EXPECT_EQ(in.a_prev->at(i, j), j == tr.a[i - 1] ? 1.0 : 0.0) << i << "," << j;

  // Outcome and covariate inputs copy through untouched when fully visible.
  for (long i = 0; i < cfg.t_len; ++i) {
    EXPECT_EQ(in.y_in->at(i, 0), tr.y[i]);
    for (long j = 0; j < cfg.d_x; ++j) EXPECT_EQ(in.x->at(i, j), tr.x[i * cfg.d_x + j]);
  }

  // Supervision: positions 0..t_len-2, labels a[i], targets y[i+1].
  ASSERT_EQ(in.valid_rows.size(), 3u);
  for (long i = 0; i < 3; ++i) {
    EXPECT_EQ(in.valid_rows[i], i);
    EXPECT_EQ(in.labels[i], tr.a[i]);
    EXPECT_EQ(in.y_next->at(i, 0), tr.y[i + 1]);
    for (long j = 0; j < cfg.d_a; ++j)
      EXPECT_EQ(in.a_cur->at(i, j), j == tr.a[i] ? 1.0 : 0.0);
  }

  EXPECT_THROW(make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len + 1}), std::invalid_argument);
  EXPECT_THROW(make_input(cfg, {&tr}, cfg.t_len + 1, {cfg.t_len}), std::invalid_argument);
}

TEST(ModelInput, CovariateVisibilityZeroesInputsAndMasksKeys) {
  ModelConfig cfg;
  cfg.t_len = 5;
  cfg.d_x = 2;
  auto tr = make_traj(cfg, 12);
  long m = 2;
  auto in = make_input(cfg, {&tr}, cfg.t_len, {m});

  for (long i = 0; i < cfg.t_len; ++i)
    for (long j = 0; j < cfg.d_x; ++j)
      EXPECT_EQ(in.x->at(i, j), i < m ? tr.x[i * cfg.d_x + j] : 0.0);

  // Covariate keys at masked positions are barred for every query; other
  // streams keep the full causal mask.
  ASSERT_EQ(in.cov_keys.size(), 1u);
  const AttentionMask& cm = *in.cov_keys[0];
  const AttentionMask& pm = *in.plain_keys[0];
  for (long i = 0; i < cfg.t_len; ++i)
    for (long j = 0; j < cfg.t_len; ++j) {
      EXPECT_EQ(pm.allowed(i, j), j <= i);
      EXPECT_EQ(cm.allowed(i, j), j <= i && j < m);
    }
}

TEST(ModelForward, MatchesHandComputedOracle) {
  ModelConfig cfg;
  cfg.t_len = 2;
  cfg.d_x = 1;
  cfg.d_a = 2;
  cfg.d_y = 1;
  cfg.d_v = 1;
  cfg.n_blocks = 1;
  cfg.d_h = 2;
  cfg.n_h = 1;
  cfg.d_r = 2;
  cfg.n_fc = 2;
  cfg.dropout = 0.0;
  cfg.l_max = 1;
  auto params = init_params(cfg, 21);
  jitter_params(params, 99);

  Trajectory tr;
  tr.x = {0.30, -0.70};
  tr.a = {1, 0};
  tr.y = {0.25, -0.50};
  tr.v = {0.80};

  auto in = make_input(cfg, {&tr}, 2, {2});
  Tape tape;
  tape.recording = false;
  auto fwd = model_forward(tape, params, cfg, in, /*training=*/false);
  auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
  auto y_hat = predict_outcome(tape, params.outcome, phi_sel, in.a_cur);
  auto probs = classify_treatment(tape, params.propensity, phi_sel);

  // --- oracle ---
  const long T = 2, D = 2;
  Vec a_prev = {0, 0, 0, 1};  // one-hot of a[0]=1 at position 1
  Vec x = {0.30, -0.70};
  Vec y = {0.25, -0.50};
  Vec v = {0.80};

  std::array<Vec, 3> H;
  H[0] = o_affine(a_prev, T, cfg.d_a, *params.embed[0].w, *params.embed[0].b);
  H[1] = o_affine(x, T, cfg.d_x, *params.embed[1].w, *params.embed[1].b);
  H[2] = o_affine(y, T, cfg.d_y, *params.embed[2].w, *params.embed[2].b);
  Vec v_emb = o_affine(v, 1, cfg.d_v, *params.embed_static.w, *params.embed_static.b);
  Vec v_tile = {v_emb[0], v_emb[1], v_emb[0], v_emb[1]};

  auto mask = make_causal_mask(T);
  const BlockParams& bp = params.blocks[0];
  std::array<Vec, 3> tilde;
  for (int s = 0; s < 3; ++s)
    tilde[s] = o_attn_sublayer(H[s], H[s], T, D, bp.self[s], params.pe, mask);

  std::array<Vec, 3> pooled = {v_tile, v_tile, v_tile};
  for (int c = 0; c < 6; ++c) {
    auto link = static_cast<CrossLink>(c);
    int tgt = static_cast<int>(cross_target(link));
    int src = static_cast<int>(cross_source(link));
    Vec term = o_attn_sublayer(tilde[tgt], H[src], T, D, bp.cross[c], params.pe, mask);
    pooled[tgt] = o_add(pooled[tgt], term);
  }

  std::array<Vec, 3> outs;
  for (int s = 0; s < 3; ++s) {
    Vec h1 = o_relu(o_affine(pooled[s], T, D, *bp.ff[s].w1, *bp.ff[s].b1));
    Vec h2 = o_affine(h1, T, D, *bp.ff[s].w2, *bp.ff[s].b2);
    outs[s] = o_ln(o_add(h2, pooled[s]), T, D, *bp.ff[s].ln.g, *bp.ff[s].ln.b);
  }

  Vec phi_tilde(T * D);
  for (long i = 0; i < T * D; ++i)
    phi_tilde[i] = (outs[0][i] + outs[2][i]) * (1.0 / 3.0) + outs[1][i] * (1.0 / 3.0);
  Vec phi = o_elu(o_affine(phi_tilde, T, D, *params.phi.w, *params.phi.b));

  ASSERT_EQ(fwd.phi->rows(), T);
  for (long i = 0; i < T; ++i)
    for (long j = 0; j < cfg.d_r; ++j)
      EXPECT_NEAR(fwd.phi->at(i, j), phi[i * cfg.d_r + j], 1e-12) << i << "," << j;

  // Outcome head at position 0 with one-hot of a[0].
  Vec z = {phi[0], phi[1], 0.0, 1.0};
  Vec h1 = o_elu(o_affine(z, 1, cfg.d_r + cfg.d_a, *params.outcome.w1, *params.outcome.b1));
  Vec yo = o_affine(h1, 1, cfg.n_fc, *params.outcome.w2, *params.outcome.b2);
  EXPECT_NEAR(y_hat->at(0, 0), yo[0], 1e-12);

  Vec ph = o_elu(o_affine({phi[0], phi[1]}, 1, cfg.d_r, *params.propensity.w1, *params.propensity.b1));
  Vec logits = o_affine(ph, 1, cfg.n_fc, *params.propensity.w2, *params.propensity.b2);
  double denom = std::exp(logits[0]) + std::exp(logits[1]);
  EXPECT_NEAR(probs->at(0, 0), std::exp(logits[0]) / denom, 1e-12);
  EXPECT_NEAR(probs->at(0, 1), std::exp(logits[1]) / denom, 1e-12);
  EXPECT_EQ(fwd.repr_source, &params);
}

TEST(ModelForward, PoolingWeightsExactAtVisibilityBoundary) {
  ModelConfig cfg;
  cfg.t_len = 3;
  auto tr = make_traj(cfg, 5);
  auto in = make_input(cfg, {&tr}, 3, {2});

  Tape tape;
  auto a = tensor(3, 2);
  auto x = tensor(3, 2);
  auto y = tensor(3, 2);
  for (long i = 0; i < 3; ++i)
    for (long j = 0; j < 2; ++j) {
      a->at(i, j) = 1.0;
      x->at(i, j) = 2.0;
      y->at(i, j) = 4.0;
    }
  auto pooled = pool_streams(tape, in, {a, x, y});
  for (long j = 0; j < 2; ++j) {
    // Visible rows: all three streams at weight 1/3.
    EXPECT_EQ(pooled->at(0, j), 5.0 * (1.0 / 3.0) + 2.0 * (1.0 / 3.0));
    EXPECT_EQ(pooled->at(1, j), 5.0 * (1.0 / 3.0) + 2.0 * (1.0 / 3.0));
    // Beyond cov_visible: treatment+outcome at 1/2, covariate dropped.
    EXPECT_EQ(pooled->at(2, j), 5.0 * 0.5);
  }
}

TEST(ModelForward, FutureCovariatesNeverLeak) {
  ModelConfig cfg;
  cfg.t_len = 6;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.l_max = 3;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 2);
  jitter_params(params, 8);
  auto tr = make_traj(cfg, 31);
  long m = 3;

  auto run = [&](const Trajectory& t) {
    auto in = make_input(cfg, {&t}, cfg.t_len, {m});
    Tape tape;
    tape.recording = false;
    return model_forward(tape, params, cfg, in, false).phi;
  };
  auto base = run(tr);

  // Covariates at masked positions can take any value without moving any
  // output position, masked rows included.
  Trajectory mod = tr;
  for (long i = m; i < cfg.t_len; ++i)
    for (long j = 0; j < cfg.d_x; ++j) mod.x[i * cfg.d_x + j] += 100.0 + i;
  auto moved = run(mod);
  EXPECT_EQ(base->data, moved->data);

  // With everything visible, perturbing inputs at positions > t0 leaves
  // positions <= t0 bit-identical (causality across all three streams).
  auto run_full = [&](const Trajectory& t) {
    auto in = make_input(cfg, {&t}, cfg.t_len, {cfg.t_len});
    Tape tape;
    tape.recording = false;
    return model_forward(tape, params, cfg, in, false).phi;
  };
  long t0 = 2;
  auto full_base = run_full(tr);
  Trajectory fut = tr;
  for (long i = t0 + 1; i < cfg.t_len; ++i) {
    fut.x[i * cfg.d_x] -= 9.0;
    fut.y[i] += 5.0;
    fut.a[i] = (fut.a[i] + 1) % cfg.d_a;
  }
  auto full_moved = run_full(fut);
  bool later_differs = false;
  for (long i = 0; i <= t0; ++i)
    for (long j = 0; j < cfg.d_r; ++j)
      EXPECT_EQ(full_base->at(i, j), full_moved->at(i, j)) << i << "," << j;
  for (long i = t0 + 1; i < cfg.t_len; ++i)
    for (long j = 0; j < cfg.d_r; ++j) later_differs |= full_base->at(i, j) != full_moved->at(i, j);
  EXPECT_TRUE(later_differs);
}

TEST(ModelForward, PrefixForwardMatchesFullForwardBitwise) {
  ModelConfig cfg;
  cfg.t_len = 7;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 13);
  jitter_params(params, 14);
  auto tr = make_traj(cfg, 15);

  auto in_full = make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len});
  Tape tape;
  tape.recording = false;
  auto full = model_forward(tape, params, cfg, in_full, false).phi;

  for (long len = 1; len <= cfg.t_len; ++len) {
    auto in_pre = make_input(cfg, {&tr}, len, {len}, /*with_targets=*/false);
    auto pre = model_forward(tape, params, cfg, in_pre, false).phi;
    for (long i = 0; i < len; ++i)
      for (long j = 0; j < cfg.d_r; ++j)
        ASSERT_EQ(pre->at(i, j), full->at(i, j)) << "len " << len << " pos " << i;
  }
}

TEST(ModelForward, BatchMatchesIndividualRuns) {
  ModelConfig cfg;
  cfg.t_len = 5;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 17);
  jitter_params(params, 18);
  auto t1 = make_traj(cfg, 41);
  auto t2 = make_traj(cfg, 42);

  Tape tape;
  tape.recording = false;
  auto in_b = make_input(cfg, {&t1, &t2}, cfg.t_len, {5, 2});
  auto both = model_forward(tape, params, cfg, in_b, false).phi;

  auto in1 = make_input(cfg, {&t1}, cfg.t_len, {5});
  auto in2 = make_input(cfg, {&t2}, cfg.t_len, {2});
  auto p1 = model_forward(tape, params, cfg, in1, false).phi;
  auto p2 = model_forward(tape, params, cfg, in2, false).phi;

  for (long i = 0; i < cfg.t_len; ++i)
    for (long j = 0; j < cfg.d_r; ++j) {
      ASSERT_EQ(both->at(i, j), p1->at(i, j));
      ASSERT_EQ(both->at(cfg.t_len + i, j), p2->at(i, j));
    }
}

TEST(ModelForward, GradientsMatchFiniteDifferences) {
  ModelConfig cfg;
  cfg.t_len = 3;
  cfg.d_x = 2;
  cfg.d_a = 3;
  cfg.d_y = 1;
  cfg.d_v = 1;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.l_max = 1;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 23);
  jitter_params(params, 24);
  auto t1 = make_traj(cfg, 51);
  auto t2 = make_traj(cfg, 52);

  auto loss_value = [&]() {
    auto in = make_input(cfg, {&t1, &t2}, cfg.t_len, {3, 1});
    Tape tape;
    tape.recording = false;
    auto fwd = model_forward(tape, params, cfg, in, false);
    auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
    auto y_hat = predict_outcome(tape, params.outcome, phi_sel, in.a_cur);
    auto probs = classify_treatment(tape, params.propensity, phi_sel);
    double v = 0.0;
    for (double d : y_hat->data) v += d * d;
    for (double d : probs->data) v += 3.0 * d * d;
    return v;
  };

  auto in = make_input(cfg, {&t1, &t2}, cfg.t_len, {3, 1});
  Tape tape;
  auto fwd = model_forward(tape, params, cfg, in, false);
  auto phi_sel = gather_rows(tape, fwd.phi, in.valid_rows);
  auto y_hat = predict_outcome(tape, params.outcome, phi_sel, in.a_cur);
  auto probs = classify_treatment(tape, params.propensity, phi_sel);
  auto loss = add(tape, sum_all(tape, square(tape, y_hat)),
                  scale(tape, sum_all(tape, square(tape, probs)), 3.0));
  backward(tape, loss);

  std::vector<TensorPtr> tensors;
  for (auto& np : named_params(params)) tensors.push_back(np.t);
  auto rep = testutil::fd_check(loss_value, tensors, 1e-5, 1e-6);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
  EXPECT_GT(rep.checked, 500);
}

TEST(ModelForward, IsolatedStreamLeavesCrossParamsUnused) {
  ModelConfig base;
  base.t_len = 4;
  base.d_h = 4;
  base.n_h = 2;
  base.d_r = 3;
  base.n_fc = 3;
  base.dropout = 0.0;
  auto cfg = isolate_stream(base, Stream::Covariate);
  EXPECT_FALSE(cfg.cross_attention[1]);
  EXPECT_TRUE(cfg.cross_attention[0]);

  auto params = init_params(cfg, 31);
  jitter_params(params, 32);
  auto tr = make_traj(cfg, 61);

  auto in = make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len});
  Tape tape;
  auto fwd = model_forward(tape, params, cfg, in, false);
  backward(tape, sum_all(tape, square(tape, fwd.phi)));

  auto zero_grad = [](const TensorPtr& t) {
    if (t->grad.empty()) return true;
    for (double g : t->grad)
      if (g != 0.0) return false;
    return true;
  };
  // Links touching the covariate stream receive no gradient; the
  // treat/out links still do.
  const auto& bp = params.blocks[0];
  for (int c : {0, 2, 3, 4})  // treat_from_cov, cov_from_treat, cov_from_out, out_from_cov
    EXPECT_TRUE(zero_grad(bp.cross[c].heads[0].w_q)) << c;
  bool live = false;
  for (int c : {1, 5})  // treat_from_out, out_from_treat survive
    for (double g : bp.cross[c].heads[0].w_q->grad) live |= g != 0.0;
  EXPECT_TRUE(live);
  // Covariate self-attention still contributes to the pooled average.
  EXPECT_FALSE(zero_grad(bp.self[1].heads[0].w_q));
}

TEST(ModelForward, CloneIsIndependentAndFrozenCloneRecordsNothing) {
  ModelConfig cfg;
  cfg.t_len = 3;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 2;
  cfg.n_fc = 2;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 41);
  auto shadow = clone_params(params, /*trainable=*/false);

  auto n0 = named_params(params);
  auto n1 = named_params(shadow);
  ASSERT_EQ(n0.size(), n1.size());
  for (size_t i = 0; i < n0.size(); ++i) {
    EXPECT_EQ(n0[i].name, n1[i].name);
    EXPECT_EQ(n0[i].t->data, n1[i].t->data);
    EXPECT_NE(n0[i].t.get(), n1[i].t.get());
    EXPECT_FALSE(n1[i].t->requires_grad);
  }
  n0[0].t->data[0] += 1.0;
  EXPECT_NE(n0[0].t->data[0], n1[0].t->data[0]);

  // A forward through the frozen clone records no backward nodes at all.
  auto tr = make_traj(cfg, 71);
  auto in = make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len});
  Tape tape;
  auto fwd = model_forward(tape, shadow, cfg, in, false);
  EXPECT_EQ(tape.node_count(), 0u);
  EXPECT_EQ(fwd.repr_source, &shadow);
  EXPECT_FALSE(fwd.phi->requires_grad);

  // Trainable clones keep requires_grad so optimizer state can attach.
  auto copy = clone_params(params, /*trainable=*/true);
  EXPECT_TRUE(named_params(copy)[0].t->requires_grad);
}

TEST(ModelForward, AbsoluteModeAddsSinusoidsToInitialStates) {
  ModelConfig cfg;
  cfg.t_len = 4;
  cfg.d_x = 1;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 2;
  cfg.n_fc = 2;
  cfg.dropout = 0.0;
  cfg.pe_mode = PeMode::Absolute;
  auto params = init_params(cfg, 43);
  jitter_params(params, 44);
  EXPECT_FALSE(params.pe.has());

  // Two positions with identical inputs must still produce different
  // representations: the additive encoding is the only thing separating them.
  Trajectory tr;
  tr.x = {0.4, 0.4, 0.4, 0.4};
  tr.a = {1, 1, 1, 1};
  tr.y = {0.2, 0.2, 0.2, 0.2};
  tr.v = {0.5};
  ASSERT_EQ(cfg.d_x, 1);
  auto in = make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len});
  Tape tape;
  tape.recording = false;
  auto fwd = model_forward(tape, params, cfg, in, false);
  double diff = 0.0;
  for (long j = 0; j < cfg.d_r; ++j) diff += std::fabs(fwd.phi->at(1, j) - fwd.phi->at(2, j));
  EXPECT_GT(diff, 1e-6);
}

// ---------------------------------------------------------------------------
// Rollout

TEST(Rollout, SingleStepMatchesFullForwardBitwise) {
  ModelConfig cfg;
  cfg.t_len = 6;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 51);
  jitter_params(params, 52);
  auto tr = make_traj(cfg, 81);
  long origin = 2;
  long a_plan = 3;

  auto preds = rollout(params, cfg, {{&tr, {a_plan}}}, origin, 1);

  // Reference: one full factual forward, read phi at the origin, apply the
  // planned treatment. Causal masking makes the longer input irrelevant.
  auto in = make_input(cfg, {&tr}, cfg.t_len, {cfg.t_len});
  Tape tape;
  tape.recording = false;
  auto fwd = model_forward(tape, params, cfg, in, false);
  auto phi_sel = gather_rows(tape, fwd.phi, {origin});
  auto onehot = tensor(1, cfg.d_a);
  onehot->at(0, a_plan) = 1.0;
  auto y_hat = predict_outcome(tape, params.outcome, phi_sel, onehot);

  ASSERT_EQ(preds.size(), 1u);
  ASSERT_EQ(preds[0].size(), 1u);
  EXPECT_EQ(preds[0][0], y_hat->at(0, 0));
}

TEST(Rollout, MatchesManualIterationLoop) {
  ModelConfig cfg;
  cfg.t_len = 8;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 53);
  jitter_params(params, 54);
  auto tr = make_traj(cfg, 82);
  long origin = 3, tau = 3;
  std::vector<long> plan = {1, 2, 0};

  auto preds = rollout(params, cfg, {{&tr, plan}}, origin, tau);

  Trajectory work = tr;
  for (long k = 0; k < tau; ++k) work.a[origin + k] = plan[k];
  std::vector<double> manual;
  for (long k = 0; k < tau; ++k) {
    long len = origin + 1 + k;
    auto in = make_input(cfg, {&work}, len, {origin + 1}, false);
    Tape tape;
    tape.recording = false;
    auto fwd = model_forward(tape, params, cfg, in, false);
    auto phi_sel = gather_rows(tape, fwd.phi, {len - 1});
    auto onehot = tensor(1, cfg.d_a);
    onehot->at(0, plan[k]) = 1.0;
    auto y_hat = predict_outcome(tape, params.outcome, phi_sel, onehot);
    manual.push_back(y_hat->at(0, 0));
    work.y[origin + k + 1] = y_hat->at(0, 0);
  }
  ASSERT_EQ(preds[0].size(), manual.size());
  for (size_t k = 0; k < manual.size(); ++k) EXPECT_EQ(preds[0][k], manual[k]);

  // Feedback matters: breaking the teacher-forced value at origin+1 changes
  // the later predictions, proving they consumed the model's own estimate.
  Trajectory frozen = tr;
  for (long k = 0; k < tau; ++k) frozen.a[origin + k] = plan[k];
  long len2 = origin + 2;
  auto in2 = make_input(cfg, {&frozen}, len2, {origin + 1}, false);
  Tape tape2;
  tape2.recording = false;
  auto fwd2 = model_forward(tape2, params, cfg, in2, false);
  auto phi2 = gather_rows(tape2, fwd2.phi, {len2 - 1});
  auto onehot2 = tensor(1, cfg.d_a);
  onehot2->at(0, plan[1]) = 1.0;
  auto teacher_forced = predict_outcome(tape2, params.outcome, phi2, onehot2);
  EXPECT_NE(teacher_forced->at(0, 0), preds[0][1]);
}

TEST(Rollout, BatchedPlansMatchIndividualRuns) {
  ModelConfig cfg;
  cfg.t_len = 7;
  cfg.d_h = 4;
  cfg.n_h = 2;
  cfg.d_r = 3;
  cfg.n_fc = 3;
  cfg.dropout = 0.0;
  auto params = init_params(cfg, 55);
  jitter_params(params, 56);
  auto t1 = make_traj(cfg, 83);
  auto t2 = make_traj(cfg, 84);
  long origin = 2, tau = 2;

  std::vector<RolloutPlan> plans = {{&t1, {0, 3}}, {&t1, {2, 2}}, {&t2, {1, 0}}};
  auto batched = rollout(params, cfg, plans, origin, tau);
  for (size_t p = 0; p < plans.size(); ++p) {
    auto solo = rollout(params, cfg, {plans[p]}, origin, tau);
    ASSERT_EQ(batched[p].size(), solo[0].size());
    for (size_t k = 0; k < solo[0].size(); ++k) EXPECT_EQ(batched[p][k], solo[0][k]) << p << "," << k;
  }

  // Different plans on the same patient actually separate.
  EXPECT_NE(batched[0][1], batched[1][1]);
}

TEST(Rollout, ValidatesArguments) {
  ModelConfig cfg;
  cfg.t_len = 5;
  cfg.d_h = 4;
  cfg.n_h = 2;
  auto params = init_params(cfg, 57);
  auto tr = make_traj(cfg, 85);
  EXPECT_THROW(rollout(params, cfg, {}, 0, 1), std::invalid_argument);
  EXPECT_THROW(rollout(params, cfg, {{&tr, {1}}}, 0, 2), std::invalid_argument);  // plan len
  EXPECT_THROW(rollout(params, cfg, {{&tr, {1, 1, 1}}}, 2, 3), std::invalid_argument);  // over end
}

// ---------------------------------------------------------------------------
// Scaler

TEST(Scaler, FitMatchesHandStatsAndRoundTrips) {
  std::vector<Trajectory> ts(2);
  ts[0].x = {1.0, 3.0};  // d_x=1, two steps
  ts[1].x = {5.0, 7.0};
  ts[0].y = {2.0, 2.0};
  ts[1].y = {4.0, 4.0};
  ts[0].v = {10.0};
  ts[1].v = {10.0};  // constant static feature
  ts[0].a = {0, 0};
  ts[1].a = {0, 0};

  auto s = fit_scaler(ts, 1, 1, 1);
  EXPECT_DOUBLE_EQ(s.x_mean[0], 4.0);
  EXPECT_DOUBLE_EQ(s.x_sd[0], std::sqrt(5.0));  // var of {1,3,5,7} = 5
  EXPECT_DOUBLE_EQ(s.y_mean[0], 3.0);
  EXPECT_DOUBLE_EQ(s.y_sd[0], 1.0);
  EXPECT_DOUBLE_EQ(s.v_mean[0], 10.0);
  EXPECT_DOUBLE_EQ(s.v_sd[0], 1e-8);  // floored, constant feature maps to 0

  auto sc = scale_trajectory(ts[0], s);
  EXPECT_DOUBLE_EQ(sc.x[0], (1.0 - 4.0) / std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(sc.v[0], 0.0);
  EXPECT_DOUBLE_EQ(unscale_y(scale_y(2.0, s), s), 2.0);
  EXPECT_DOUBLE_EQ(unscale_y(sc.y[1], s), 2.0);
}
