#pragma once
// Three-stream sequence model for counterfactual outcome estimation.
//
// Treatments, covariates, and outcomes are embedded into separate streams.
// Each transformer block runs masked self-attention per stream, then six
// cross-attentions that exchange information between streams, pools the
// results together with the static-covariate embedding, and applies a
// per-stream feed-forward. The pooled per-position states are averaged
// across streams and projected into a balanced representation Phi, from
// which two heads read: an outcome regressor (also fed the current
// treatment) and a treatment classifier used for domain confusion.

#include <array>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "data.hpp"
#include "tensor.hpp"

namespace cfseq {

enum class Stream { Treatment = 0, Covariate = 1, Outcome = 2 };

// Cross-attention links, named target_from_source. The two links feeding a
// stream are summed during pooling.
enum class CrossLink {
  TreatFromCov = 0,
  TreatFromOut = 1,
  CovFromTreat = 2,
  CovFromOut = 3,
  OutFromCov = 4,
  OutFromTreat = 5,
};

inline Stream cross_target(CrossLink l) {
  static constexpr Stream t[6] = {Stream::Treatment, Stream::Treatment, Stream::Covariate,
                                  Stream::Covariate, Stream::Outcome,   Stream::Outcome};
  return t[static_cast<int>(l)];
}
inline Stream cross_source(CrossLink l) {
  static constexpr Stream s[6] = {Stream::Covariate, Stream::Outcome, Stream::Treatment,
                                  Stream::Outcome,   Stream::Covariate, Stream::Treatment};
  return s[static_cast<int>(l)];
}

inline const char* stream_name(Stream s) {
  static constexpr const char* n[3] = {"treat", "cov", "out"};
  return n[static_cast<int>(s)];
}
inline const char* cross_name(CrossLink l) {
  static constexpr const char* n[6] = {"treat_from_cov", "treat_from_out", "cov_from_treat",
                                       "cov_from_out",   "out_from_cov",   "out_from_treat"};
  return n[static_cast<int>(l)];
}

// Positional encoding variants. The default learns one shared table of
// relative-distance key/value offsets. RelativeFixed freezes that table at
// sinusoidal values; Absolute drops it and instead adds fixed sinusoidal
// encodings to the initial hidden state of every stream.
enum class PeMode { RelativeTrainable = 0, RelativeFixed = 1, Absolute = 2 };

struct ModelConfig {
  long d_x = 2;  // time-varying covariates per step
  long d_a = 4;  // treatment categories
  long d_y = 1;  // outcomes per step
  long d_v = 1;  // static covariates
  long t_len = 30;

  long n_blocks = 1;
  long d_h = 16;  // stream width
  long n_h = 2;   // attention heads per module
  long d_r = 16;  // balanced representation width
  long n_fc = 32; // hidden units in the output heads
  double dropout = 0.1;
  long l_max = 15;  // relative distances beyond this share one table row
  PeMode pe_mode = PeMode::RelativeTrainable;
  bool attn_dropout = true;                            // DropAttention toggle
  std::array<bool, 3> cross_attention = {true, true, true};  // per stream

  long d_qkv() const { return d_h / n_h; }

  void validate() const {
    std::string bad;
    auto req = [&](bool ok, const char* what) {
      if (!ok) {
        if (!bad.empty()) bad += ", ";
        bad += what;
      }
    };
    req(d_x >= 1, "d_x >= 1");
    req(d_a >= 2, "d_a >= 2");
    req(d_y >= 1, "d_y >= 1");
    req(d_v >= 1, "d_v >= 1");
    req(t_len >= 2, "t_len >= 2");
    req(n_blocks >= 1, "n_blocks >= 1");
    req(d_h >= 1, "d_h >= 1");
    req(n_h >= 1, "n_h >= 1");
    req(n_h >= 1 && d_h % n_h == 0, "d_h divisible by n_h");
    req(d_r >= 1, "d_r >= 1");
    req(n_fc >= 1, "n_fc >= 1");
    req(dropout >= 0.0 && dropout < 1.0, "dropout in [0,1)");
    req(l_max >= 0, "l_max >= 0");
    if (!bad.empty()) throw std::invalid_argument("ModelConfig: violated: " + bad);
  }
};

// ---------------------------------------------------------------------------
// Parameters

enum class ParamGroup { Repr = 0, OutcomeHead = 1, PropensityHead = 2 };

struct AffineParams {
  TensorPtr w, b;
};
struct LnParams {
  TensorPtr g, b;
};
struct AttnParams {
  std::vector<HeadParams> heads;
  LnParams ln;  // layer norm applied to (attention + residual)
};
struct FfParams {
  TensorPtr w1, b1, w2, b2;
  LnParams ln;
};
struct BlockParams {
  std::array<AttnParams, 3> self;   // indexed by Stream
  std::array<AttnParams, 6> cross;  // indexed by CrossLink
  std::array<FfParams, 3> ff;       // indexed by Stream
};
struct HeadNetParams {
  TensorPtr w1, b1, w2, b2;
};

struct ModelParams {
  std::array<AffineParams, 3> embed;  // indexed by Stream
  AffineParams embed_static;
  RelPosTable pe;  // tables absent in PeMode::Absolute
  std::vector<BlockParams> blocks;
  AffineParams phi;
  HeadNetParams outcome;
  HeadNetParams propensity;
};

struct NamedParam {
  std::string name;
  ParamGroup group;
  TensorPtr t;
};

namespace detail {

template <typename Fn>
void visit_params(const ModelParams& p, Fn&& fn) {
  auto aff = [&](const std::string& base, const AffineParams& a, ParamGroup g) {
    fn(base + ".w", g, a.w);
    fn(base + ".b", g, a.b);
  };
  auto ln = [&](const std::string& base, const LnParams& l, ParamGroup g) {
    fn(base + ".ln.g", g, l.g);
    fn(base + ".ln.b", g, l.b);
  };
  auto attn = [&](const std::string& base, const AttnParams& a, ParamGroup g) {
    for (size_t h = 0; h < a.heads.size(); ++h) {
      std::string hb = base + ".head" + std::to_string(h);
      fn(hb + ".wq", g, a.heads[h].w_q);
      fn(hb + ".bq", g, a.heads[h].b_q);
      fn(hb + ".wk", g, a.heads[h].w_k);
      fn(hb + ".bk", g, a.heads[h].b_k);
      fn(hb + ".wv", g, a.heads[h].w_v);
      fn(hb + ".bv", g, a.heads[h].b_v);
    }
    ln(base, a.ln, g);
  };

  const ParamGroup R = ParamGroup::Repr;
  aff("embed.treat", p.embed[0], R);
  aff("embed.cov", p.embed[1], R);
  aff("embed.out", p.embed[2], R);
  aff("embed.static", p.embed_static, R);
  if (p.pe.has()) {
    fn("pe.keys", R, p.pe.keys);
    fn("pe.values", R, p.pe.values);
  }
  for (size_t b = 0; b < p.blocks.size(); ++b) {
    std::string bb = "block" + std::to_string(b);
    for (int s = 0; s < 3; ++s)
      attn(bb + ".self." + stream_name(static_cast<Stream>(s)), p.blocks[b].self[s], R);
    for (int c = 0; c < 6; ++c)
      attn(bb + ".cross." + cross_name(static_cast<CrossLink>(c)), p.blocks[b].cross[c], R);
    for (int s = 0; s < 3; ++s) {
      std::string fb = bb + ".ff." + std::string(stream_name(static_cast<Stream>(s)));
      fn(fb + ".w1", R, p.blocks[b].ff[s].w1);
      fn(fb + ".b1", R, p.blocks[b].ff[s].b1);
      fn(fb + ".w2", R, p.blocks[b].ff[s].w2);
      fn(fb + ".b2", R, p.blocks[b].ff[s].b2);
      ln(fb, p.blocks[b].ff[s].ln, R);
    }
  }
  aff("phi", p.phi, R);
  fn("head.outcome.w1", ParamGroup::OutcomeHead, p.outcome.w1);
  fn("head.outcome.b1", ParamGroup::OutcomeHead, p.outcome.b1);
  fn("head.outcome.w2", ParamGroup::OutcomeHead, p.outcome.w2);
  fn("head.outcome.b2", ParamGroup::OutcomeHead, p.outcome.b2);
  fn("head.propensity.w1", ParamGroup::PropensityHead, p.propensity.w1);
  fn("head.propensity.b1", ParamGroup::PropensityHead, p.propensity.b1);
  fn("head.propensity.w2", ParamGroup::PropensityHead, p.propensity.w2);
  fn("head.propensity.b2", ParamGroup::PropensityHead, p.propensity.b2);
}

}  // namespace detail

// Stable enumeration of every parameter tensor; construction, checkpointing,
// and optimizer slots all rely on this order.
inline std::vector<NamedParam> named_params(const ModelParams& p) {
  std::vector<NamedParam> out;
  detail::visit_params(p, [&](const std::string& n, ParamGroup g, const TensorPtr& t) {
    out.push_back({n, g, t});
  });
  return out;
}

inline long count_params(const ModelParams& p, bool trainable_only = true) {
  long n = 0;
  detail::visit_params(p, [&](const std::string&, ParamGroup, const TensorPtr& t) {
    if (!trainable_only || t->requires_grad) n += t->rows() * t->cols();
  });
  return n;
}

inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(hash_combine(seed, 0x6d6f64656cULL));  // "model"
  auto weight = [&](long rows, long cols) {
    auto t = tensor(rows, cols, true);
    double s = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& v : t->data) v = (2.0 * rng.uniform() - 1.0) * s;
    return t;
  };
  auto bias = [&](long cols) { return tensor(1, cols, true); };
  auto ln_pair = [&]() {
    LnParams l{tensor(1, cfg.d_h, true), tensor(1, cfg.d_h, true)};
    for (auto& v : l.g->data) v = 1.0;
    return l;
  };
  auto attn = [&]() {
    AttnParams a;
    for (long h = 0; h < cfg.n_h; ++h)
      a.heads.push_back(HeadParams{weight(cfg.d_h, cfg.d_qkv()), bias(cfg.d_qkv()),
                                   weight(cfg.d_h, cfg.d_qkv()), bias(cfg.d_qkv()),
                                   weight(cfg.d_h, cfg.d_qkv()), bias(cfg.d_qkv())});
    a.ln = ln_pair();
    return a;
  };

  ModelParams p;
  p.embed[0] = {weight(cfg.d_a, cfg.d_h), bias(cfg.d_h)};
  p.embed[1] = {weight(cfg.d_x, cfg.d_h), bias(cfg.d_h)};
  p.embed[2] = {weight(cfg.d_y, cfg.d_h), bias(cfg.d_h)};
  p.embed_static = {weight(cfg.d_v, cfg.d_h), bias(cfg.d_h)};
  switch (cfg.pe_mode) {
    case PeMode::RelativeTrainable: p.pe = make_rel_pos_table(cfg.l_max, cfg.d_qkv(), rng); break;
    case PeMode::RelativeFixed: p.pe = fixed_rel_pos_table(cfg.l_max, cfg.d_qkv()); break;
    case PeMode::Absolute: break;  // no tables; sinusoids are added to inputs
  }
  for (long b = 0; b < cfg.n_blocks; ++b) {
    BlockParams bp;
    for (int s = 0; s < 3; ++s) bp.self[s] = attn();
    for (int c = 0; c < 6; ++c) bp.cross[c] = attn();
    for (int s = 0; s < 3; ++s) {
      // Feed-forward keeps the stream width; the hidden layer matches d_h.
      bp.ff[s] = FfParams{weight(cfg.d_h, cfg.d_h), bias(cfg.d_h), weight(cfg.d_h, cfg.d_h),
                          bias(cfg.d_h), ln_pair()};
    }
    p.blocks.push_back(std::move(bp));
  }
  p.phi = {weight(cfg.d_h, cfg.d_r), bias(cfg.d_r)};
  p.outcome = {weight(cfg.d_r + cfg.d_a, cfg.n_fc), bias(cfg.n_fc), weight(cfg.n_fc, cfg.d_y),
               bias(cfg.d_y)};
  p.propensity = {weight(cfg.d_r, cfg.n_fc), bias(cfg.n_fc), weight(cfg.n_fc, cfg.d_a),
                  bias(cfg.d_a)};
  return p;
}

// Deep copy with fresh tensors. `trainable` false marks every copy as a
// constant, which is what exponential-moving-average shadows need: forwards
// through them record no backward nodes.
inline ModelParams clone_params(const ModelParams& src, bool trainable) {
  ModelParams dst = src;  // copies shared_ptrs; replace each tensor below
  auto fresh = [&](TensorPtr& t) {
    if (!t) return;
    auto c = tensor(t->rows(), t->cols(), trainable && t->requires_grad);
    c->data = t->data;
    t = c;
  };
  auto fix_aff = [&](AffineParams& a) { fresh(a.w); fresh(a.b); };
  auto fix_ln = [&](LnParams& l) { fresh(l.g); fresh(l.b); };
  auto fix_attn = [&](AttnParams& a) {
    for (auto& h : a.heads) {
      fresh(h.w_q); fresh(h.b_q);
      fresh(h.w_k); fresh(h.b_k);
      fresh(h.w_v); fresh(h.b_v);
    }
    fix_ln(a.ln);
  };
  for (auto& e : dst.embed) fix_aff(e);
  fix_aff(dst.embed_static);
  fresh(dst.pe.keys);
  fresh(dst.pe.values);
  for (auto& b : dst.blocks) {
    for (auto& a : b.self) fix_attn(a);
    for (auto& a : b.cross) fix_attn(a);
    for (auto& f : b.ff) {
      fresh(f.w1); fresh(f.b1);
      fresh(f.w2); fresh(f.b2);
      fix_ln(f.ln);
    }
  }
  fix_aff(dst.phi);
  fresh(dst.outcome.w1); fresh(dst.outcome.b1);
  fresh(dst.outcome.w2); fresh(dst.outcome.b2);
  fresh(dst.propensity.w1); fresh(dst.propensity.b1);
  fresh(dst.propensity.w2); fresh(dst.propensity.b2);
  return dst;
}

// Ablation helper: cut every cross-attention link touching one stream.
inline ModelConfig isolate_stream(ModelConfig cfg, Stream s) {
  cfg.cross_attention[static_cast<int>(s)] = false;
  return cfg;
}

// ---------------------------------------------------------------------------
// Batched model input

// Flattened batch of same-length sequences, sample-major: row s*t_len + i is
// position i of sample s. Trajectories must already be in scaled units.
//
// The treatment stream is shifted in the data itself: its row i holds the
// one-hot of a[i-1] (zeros at i == 0), so position i only ever exposes
// treatments chosen before i and every attention module can use the same
// plain causal mask. Covariates beyond cov_visible[s] are zeroed in the
// input and additionally barred from acting as attention keys.
struct ModelInput {
  long batch = 0;
  long t_len = 0;
  TensorPtr x, a_prev, y_in;  // (batch*t_len) x {d_x, d_a, d_y}
  TensorPtr v;                // batch x d_v
  std::vector<long> cov_visible;

  std::vector<AttentionMask> mask_store;     // [0] causal, then per-sample cov masks
  std::vector<const AttentionMask*> plain_keys;  // size 1
  std::vector<const AttentionMask*> cov_keys;    // size 1 or batch

  // Supervision for positions i in [0, t_len-2]: predict y[i+1] and a[i].
  std::vector<long> valid_rows;  // flattened row indices
  TensorPtr y_next;              // |valid| x d_y targets
  TensorPtr a_cur;               // |valid| x d_a one-hot of a[i]
  std::vector<long> labels;      // |valid| treatment ids a[i]

  ModelInput() = default;
  ModelInput(const ModelInput&) = delete;
  ModelInput& operator=(const ModelInput&) = delete;
  // Moves keep mask pointers valid: vector storage is transferred, elements
  // do not relocate.
  ModelInput(ModelInput&&) = default;
  ModelInput& operator=(ModelInput&&) = default;

  long row(long sample, long pos) const { return sample * t_len + pos; }
};

// Build a batch from scaled trajectories. t_len may truncate (prefix
// forward); cov_visible[s] counts the leading covariate positions sample s
// may use (t_len for fully observed). with_targets controls the supervision
// fields.
inline ModelInput make_input(const ModelConfig& cfg, const std::vector<const Trajectory*>& trajs,
                             long t_len, const std::vector<long>& cov_visible,
                             bool with_targets = true) {
  long b = static_cast<long>(trajs.size());
  if (b == 0) throw std::invalid_argument("make_input: empty batch");
  if (static_cast<long>(cov_visible.size()) != b)
    throw std::invalid_argument("make_input: cov_visible size mismatch");
  if (t_len < 1 || t_len > cfg.t_len) throw std::invalid_argument("make_input: bad t_len");

  ModelInput in;
  in.batch = b;
  in.t_len = t_len;
  in.cov_visible = cov_visible;
  in.x = tensor(b * t_len, cfg.d_x);
  in.a_prev = tensor(b * t_len, cfg.d_a);
  in.y_in = tensor(b * t_len, cfg.d_y);
  in.v = tensor(b, cfg.d_v);

  for (long s = 0; s < b; ++s) {
    const Trajectory& tr = *trajs[s];
    if (static_cast<long>(tr.y.size()) < t_len * cfg.d_y ||
        static_cast<long>(tr.x.size()) < t_len * cfg.d_x ||
        static_cast<long>(tr.a.size()) < t_len || static_cast<long>(tr.v.size()) != cfg.d_v)
      throw std::invalid_argument("make_input: trajectory shorter than t_len");
    long m = cov_visible[s];
    if (m < 0 || m > t_len) throw std::invalid_argument("make_input: cov_visible out of range");
    for (long i = 0; i < t_len; ++i) {
      long r = in.row(s, i);
      if (i < m)
        for (long j = 0; j < cfg.d_x; ++j) in.x->at(r, j) = tr.x[i * cfg.d_x + j];
      if (i > 0) {
        long id = tr.a[i - 1];
        if (id < 0 || id >= cfg.d_a) throw std::invalid_argument("make_input: treatment id out of range");
        in.a_prev->at(r, id) = 1.0;
      }
      for (long j = 0; j < cfg.d_y; ++j) in.y_in->at(r, j) = tr.y[i * cfg.d_y + j];
    }
    for (long j = 0; j < cfg.d_v; ++j) in.v->at(s, j) = tr.v[j];
  }

  in.mask_store.reserve(1 + static_cast<size_t>(b));
  in.mask_store.push_back(make_causal_mask(t_len));
  bool all_visible = true;
  for (long s = 0; s < b; ++s) all_visible = all_visible && cov_visible[s] == t_len;
  if (!all_visible)
    for (long s = 0; s < b; ++s) {
      AttentionMask m = in.mask_store[0];
      mask_keys_from(m, cov_visible[s]);
      in.mask_store.push_back(std::move(m));
    }
  in.plain_keys = {&in.mask_store[0]};
  if (all_visible) {
    in.cov_keys = {&in.mask_store[0]};
  } else {
    for (long s = 0; s < b; ++s) in.cov_keys.push_back(&in.mask_store[1 + s]);
  }

  if (with_targets) {
    if (t_len < 2) throw std::invalid_argument("make_input: targets need t_len >= 2");
    long n_valid = b * (t_len - 1);
    in.y_next = tensor(n_valid, cfg.d_y);
    in.a_cur = tensor(n_valid, cfg.d_a);
    in.valid_rows.reserve(n_valid);
    in.labels.reserve(n_valid);
    long k = 0;
    for (long s = 0; s < b; ++s) {
      const Trajectory& tr = *trajs[s];
      for (long i = 0; i + 1 < t_len; ++i, ++k) {
        in.valid_rows.push_back(in.row(s, i));
        for (long j = 0; j < cfg.d_y; ++j) in.y_next->at(k, j) = tr.y[(i + 1) * cfg.d_y + j];
        in.a_cur->at(k, tr.a[i]) = 1.0;
        in.labels.push_back(tr.a[i]);
      }
    }
  }
  return in;
}

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardResult {
  TensorPtr phi;  // (batch*t_len) x d_r balanced representation
  // Which parameter struct produced the representation; training
  // instrumentation checks the classifier consumed the intended one.
  const ModelParams* repr_source = nullptr;
};

namespace detail {

inline const std::vector<const AttentionMask*>& key_masks(const ModelInput& in, Stream key_stream) {
  return key_stream == Stream::Covariate ? in.cov_keys : in.plain_keys;
}

inline TensorPtr attn_sublayer(Tape& tape, const TensorPtr& q_state, const TensorPtr& kv_state,
                               const AttnParams& ap, const RelPosTable& pe,
                               const std::vector<const AttentionMask*>& masks, AttnDropout drop,
                               long batch) {
  auto att = attend_relative(tape, q_state, kv_state, ap.heads, pe, masks, drop, batch);
  return layer_norm(tape, add(tape, att, q_state), ap.ln.g, ap.ln.b);
}

}  // namespace detail

// One transformer block over the three streams. `streams` holds the block
// inputs; cross-attention queries come from the self-attended streams while
// keys and values come from the raw block inputs. A disabled link falls back
// to the target's self-attended state, so with both links cut the pooled sum
// degenerates to twice the self-attention path plus statics.
inline std::array<TensorPtr, 3> block_forward(Tape& tape, const BlockParams& bp,
                                              const RelPosTable& pe, const ModelConfig& cfg,
                                              const ModelInput& in,
                                              const std::array<TensorPtr, 3>& streams,
                                              const TensorPtr& static_tile, bool training,
                                              Rng* drop_rng) {
  AttnDropout adrop{cfg.attn_dropout ? cfg.dropout : 0.0, training, drop_rng};

  std::array<TensorPtr, 3> tilde;
  for (int s = 0; s < 3; ++s)
    tilde[s] = detail::attn_sublayer(tape, streams[s], streams[s], bp.self[s], pe,
                                     detail::key_masks(in, static_cast<Stream>(s)), adrop,
                                     in.batch);

  std::array<TensorPtr, 3> pooled;
  for (int s = 0; s < 3; ++s) pooled[s] = static_tile;
  for (int c = 0; c < 6; ++c) {
    auto link = static_cast<CrossLink>(c);
    int tgt = static_cast<int>(cross_target(link));
    int src = static_cast<int>(cross_source(link));
    TensorPtr term;
    if (cfg.cross_attention[tgt] && cfg.cross_attention[src]) {
      term = detail::attn_sublayer(tape, tilde[tgt], streams[src], bp.cross[c], pe,
                                   detail::key_masks(in, cross_source(link)), adrop, in.batch);
    } else {
      term = tilde[tgt];
    }
    pooled[tgt] = add(tape, pooled[tgt], term);
  }

  std::array<TensorPtr, 3> out;
  for (int s = 0; s < 3; ++s) {
    const FfParams& f = bp.ff[s];
    auto h = activation(tape, affine(tape, pooled[s], f.w1, f.b1), Act::Relu);
    if (drop_rng) h = dropout(tape, h, cfg.dropout, training, *drop_rng);
    h = affine(tape, h, f.w2, f.b2);
    if (drop_rng) h = dropout(tape, h, cfg.dropout, training, *drop_rng);
    out[s] = layer_norm(tape, add(tape, h, pooled[s]), f.ln.g, f.ln.b);
  }
  return out;
}

// Per-position average of the streams. Positions with the covariate visible
// average all three; later positions average treatment and outcome only.
inline TensorPtr pool_streams(Tape& tape, const ModelInput& in,
                              const std::array<TensorPtr, 3>& streams) {
  std::vector<double> w_ay(in.batch * in.t_len), w_x(in.batch * in.t_len);
  for (long s = 0; s < in.batch; ++s)
    for (long i = 0; i < in.t_len; ++i) {
      long r = in.row(s, i);
      bool covered = i < in.cov_visible[s];
      w_ay[r] = covered ? 1.0 / 3.0 : 0.5;
      w_x[r] = covered ? 1.0 / 3.0 : 0.0;
    }
  auto ay = add(tape, streams[static_cast<int>(Stream::Treatment)],
                streams[static_cast<int>(Stream::Outcome)]);
  return add(tape, scale_rows(tape, ay, std::move(w_ay)),
             scale_rows(tape, streams[static_cast<int>(Stream::Covariate)], std::move(w_x)));
}

// Full forward pass to the balanced representation.
inline ForwardResult model_forward(Tape& tape, const ModelParams& params, const ModelConfig& cfg,
                                   const ModelInput& in, bool training, Rng* drop_rng = nullptr) {
  if (training && cfg.dropout > 0.0 && drop_rng == nullptr)
    throw std::invalid_argument("model_forward: training with dropout needs an rng");

  std::array<TensorPtr, 3> streams{
      affine(tape, in.a_prev, params.embed[0].w, params.embed[0].b),
      affine(tape, in.x, params.embed[1].w, params.embed[1].b),
      affine(tape, in.y_in, params.embed[2].w, params.embed[2].b),
  };
  if (cfg.pe_mode == PeMode::Absolute) {
    auto pe_rows = absolute_pe(in.t_len, cfg.d_h);
    auto tile = tensor(in.batch * in.t_len, cfg.d_h);
    for (long s = 0; s < in.batch; ++s)
      for (long i = 0; i < in.t_len; ++i)
        for (long j = 0; j < cfg.d_h; ++j) tile->at(in.row(s, i), j) = pe_rows->at(i, j);
    for (auto& st : streams) st = add(tape, st, tile);
  }
  auto v_emb = affine(tape, in.v, params.embed_static.w, params.embed_static.b);
  auto static_tile = repeat_rows(tape, v_emb, in.t_len);

  Rng* rng = training ? drop_rng : nullptr;
  for (const auto& bp : params.blocks)
    streams = block_forward(tape, bp, params.pe, cfg, in, streams, static_tile, training, rng);

  auto phi_tilde = pool_streams(tape, in, streams);
  auto phi = activation(tape, affine(tape, phi_tilde, params.phi.w, params.phi.b), Act::Elu);
  if (rng) phi = dropout(tape, phi, cfg.dropout, training, *rng);
  return ForwardResult{phi, &params};
}

// Outcome head: reads the representation plus the one-hot of the treatment
// whose effect is being predicted.
inline TensorPtr predict_outcome(Tape& tape, const HeadNetParams& head, const TensorPtr& phi_rows,
                                 const TensorPtr& a_onehot) {
  auto z = concat_cols(tape, {phi_rows, a_onehot});
  auto h = activation(tape, affine(tape, z, head.w1, head.b1), Act::Elu);
  return affine(tape, h, head.w2, head.b2);
}

// Treatment classifier over the representation alone.
inline TensorPtr classify_treatment(Tape& tape, const HeadNetParams& head,
                                    const TensorPtr& phi_rows) {
  auto h = activation(tape, affine(tape, phi_rows, head.w1, head.b1), Act::Elu);
  return softmax_rows(tape, affine(tape, h, head.w2, head.b2));
}

// ---------------------------------------------------------------------------
// Autoregressive rollout

// One plan: a scaled factual trajectory plus the treatments to apply at
// origin, origin+1, ... All plans in a batch share origin and horizon.
struct RolloutPlan {
  const Trajectory* traj = nullptr;
  std::vector<long> treatments;
};

// Predict y[origin+1 .. origin+tau] under each plan, feeding predictions
// back as outcome inputs. Covariates stay visible through the origin only.
// Returns scaled predictions, one tau*d_y row-major vector per plan.
inline std::vector<std::vector<double>> rollout(const ModelParams& params, const ModelConfig& cfg,
                                                const std::vector<RolloutPlan>& plans, long origin,
                                                long tau) {
  if (plans.empty()) throw std::invalid_argument("rollout: no plans");
  if (tau < 1) throw std::invalid_argument("rollout: tau must be >= 1");
  if (origin < 0 || origin + tau >= cfg.t_len)
    throw std::invalid_argument("rollout: origin+tau exceeds t_len-1");

  long n = static_cast<long>(plans.size());
  std::vector<Trajectory> work;
  work.reserve(n);
  for (const auto& p : plans) {
    if (static_cast<long>(p.treatments.size()) != tau)
      throw std::invalid_argument("rollout: plan length != tau");
    Trajectory w = *p.traj;
    for (long k = 0; k < tau; ++k) w.a[origin + k] = p.treatments[k];
    work.push_back(std::move(w));
  }

  std::vector<std::vector<double>> preds(n, std::vector<double>(tau * cfg.d_y));
  std::vector<const Trajectory*> ptrs(n);
  for (long i = 0; i < n; ++i) ptrs[i] = &work[i];
  std::vector<long> cov(n, origin + 1);

  for (long k = 0; k < tau; ++k) {
    long len = origin + 1 + k;
    auto in = make_input(cfg, ptrs, len, cov, /*with_targets=*/false);
    Tape tape;
    tape.recording = false;
    auto fwd = model_forward(tape, params, cfg, in, /*training=*/false);
    std::vector<long> rows(n);
    for (long i = 0; i < n; ++i) rows[i] = in.row(i, len - 1);
    auto phi_sel = gather_rows(tape, fwd.phi, rows);
    auto a_onehot = tensor(n, cfg.d_a);
    for (long i = 0; i < n; ++i) a_onehot->at(i, work[i].a[origin + k]) = 1.0;
    auto y_hat = predict_outcome(tape, params.outcome, phi_sel, a_onehot);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < cfg.d_y; ++j) {
        double val = y_hat->at(i, j);
        preds[i][k * cfg.d_y + j] = val;
        work[i].y[(origin + k + 1) * cfg.d_y + j] = val;  // fed back next step
      }
  }
  return preds;
}

}  // namespace cfseq
