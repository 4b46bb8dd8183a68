#pragma once
// Masked multi-head attention with shared relative positional tables.
//
// For query position i and key position j the per-head score is
//
//     logit(i, j) = q_i . (k_j + w_keys[dist]) / sqrt(d_qkv),
//     dist        = min(i - j, l_max),
//
// i.e. one trainable offset row per backward distance, clipped at l_max, so
// each table has (l_max + 1) x d_qkv entries. Attention weights then mix
// offset values the same way:
//
//     out_i = sum_j alpha(i, j) * (v_j + w_values[dist]).
//
// A single table pair is shared by every head of every attention module in
// the model; the caller owns the tables and passes them in. Heads are
// concatenated in index order with no output projection.
//
// Masks must be causal (a query may never attend a later key): backward
// distances are only defined for the past. A query row whose keys are all
// masked yields a zero output row; mini-batch augmentation can mask every
// covariate key, so this case is ordinary input here, unlike the standalone
// softmax_rows op where a fully masked row is an error.

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfseq/tensor.hpp"

namespace cfseq {

struct AttentionMask {
  long t_q = 0, t_k = 0;
  std::vector<uint8_t> allow;  // row-major, 1 = query row i may attend key col j

  bool allowed(long i, long j) const { return allow[static_cast<size_t>(i) * t_k + j] != 0; }
  void set(long i, long j, bool v) { allow[static_cast<size_t>(i) * t_k + j] = v ? 1 : 0; }
  long allowed_count() const {
    long n = 0;
    for (uint8_t v : allow) n += v;
    return n;
  }
};

// Square causal mask. shift_for_treatments = false allows j <= i; true allows
// j <= i - 1, the variant needed when the key stream carries entries dated one
// step later than their position index, so the boundary key is off limits.
// (Row 0 of the shifted mask allows nothing.)
inline AttentionMask make_causal_mask(long t, bool shift_for_treatments = false) {
  if (t <= 0) throw std::invalid_argument("make_causal_mask: length must be positive");
  AttentionMask m;
  m.t_q = m.t_k = t;
  m.allow.assign(static_cast<size_t>(t) * t, 0);
  for (long i = 0; i < t; ++i) {
    long last = shift_for_treatments ? i - 1 : i;
    for (long j = 0; j <= last; ++j) m.set(i, j, true);
  }
  return m;
}

// Forbids every key column >= first_masked (composes with AND). Used to hide
// covariates past the prediction origin from all queries.
inline void mask_keys_from(AttentionMask& m, long first_masked) {
  for (long i = 0; i < m.t_q; ++i)
    for (long j = std::max(first_masked, 0L); j < m.t_k; ++j) m.set(i, j, false);
}

struct HeadParams {
  TensorPtr w_q, b_q, w_k, b_k, w_v, b_v;  // d_h x d_qkv projections and 1 x d_qkv biases
};

struct RelPosTable {
  TensorPtr keys;    // (l_max + 1) x d_qkv; row r holds the offset for distance r
  TensorPtr values;  // same shape
  long l_max = 0;
  bool has() const { return keys != nullptr; }
};

inline RelPosTable make_rel_pos_table(long l_max, long d_qkv, Rng& rng) {
  RelPosTable t;
  t.l_max = l_max;
  t.keys = tensor(l_max + 1, d_qkv, true);
  t.values = tensor(l_max + 1, d_qkv, true);
  double s = 1.0 / std::sqrt(static_cast<double>(d_qkv));
  for (auto& v : t.keys->data) v = (2.0 * rng.uniform() - 1.0) * s;
  for (auto& v : t.values->data) v = (2.0 * rng.uniform() - 1.0) * s;
  return t;
}

// Sinusoidal encoding of positions 0..t_len-1 into d columns:
// even column 2j holds sin(t / 10000^(2j/d)), odd column 2j+1 the cosine.
inline TensorPtr absolute_pe(long t_len, long d) {
  auto pe = tensor(t_len, d);
  for (long t = 0; t < t_len; ++t)
    for (long c = 0; c < d; ++c) {
      double expo = static_cast<double>(2 * (c / 2)) / static_cast<double>(d);
      double angle = static_cast<double>(t) / std::pow(10000.0, expo);
      pe->at(t, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

// Non-trainable relative tables filled with the sinusoidal scheme: the row
// for distance r equals absolute_pe row r. Used by the fixed-PE ablation.
inline RelPosTable fixed_rel_pos_table(long l_max, long d_qkv) {
  RelPosTable t;
  t.l_max = l_max;
  auto rows = absolute_pe(l_max + 1, d_qkv);
  t.keys = tensor(l_max + 1, d_qkv, false);
  t.values = tensor(l_max + 1, d_qkv, false);
  t.keys->data = rows->data;
  t.values->data = rows->data;
  return t;
}

struct AttnDropout {
  double p = 0.0;
  bool training = false;
  Rng* rng = nullptr;
};

namespace detail {

inline void validate_causal(const AttentionMask& m) {
  if (m.t_q != m.t_k)
    throw std::invalid_argument("attention mask: query/key lengths differ; streams share one timeline");
  for (long i = 0; i < m.t_q; ++i)
    for (long j = i + 1; j < m.t_k; ++j)
      if (m.allowed(i, j))
        throw std::invalid_argument("attention mask: position " + std::to_string(i) +
                                    " may attend future key " + std::to_string(j));
}

// One fused tape node per (attention module, head) covering the whole batch:
// scores, masked softmax, attentional dropout and the offset-weighted value
// sum, with a hand-written backward. Q, K, V are (batch * t) x d_qkv. The
// Toeplitz structure lets the relative terms collapse into per-bucket sums:
// the score offset is q_i . w_keys[dist] (precomputed as one matmul) and the
// value offset is (sum of weights in bucket) * w_values[dist].
inline TensorPtr rel_attention_core(Tape& tape, const TensorPtr& q, const TensorPtr& k,
                                    const TensorPtr& v, const RelPosTable& pe,
                                    const std::vector<const AttentionMask*>& masks, long batch,
                                    const AttnDropout& drop) {
  long t_len = q->rows() / batch;
  long d = q->cols();
  long n_buckets = pe.has() ? pe.l_max + 1 : 1;
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  bool dropping = drop.training && drop.p > 0.0;
  double keep_scale = dropping ? 1.0 / (1.0 - drop.p) : 1.0;

  auto out = tensor(q->rows(), d);
  // Saved for backward: pre-dropout attention weights (dense, zero where
  // masked), the dropout keep mask, and per-bucket post-dropout weight sums.
  auto alpha = std::make_shared<std::vector<double>>(static_cast<size_t>(batch) * t_len * t_len, 0.0);
  auto kept = dropping ? std::make_shared<std::vector<uint8_t>>(alpha->size(), 1)
                       : std::shared_ptr<std::vector<uint8_t>>();
  auto abar = std::make_shared<std::vector<double>>(static_cast<size_t>(q->rows()) * n_buckets, 0.0);

  std::vector<double> qwk;
  if (pe.has()) {
    qwk.assign(static_cast<size_t>(q->rows()) * n_buckets, 0.0);
    acc_mm_nt(q->data.data(), pe.keys->data.data(), qwk.data(), q->rows(), d, n_buckets);
  }

  std::vector<double> logits(t_len);
  for (long b = 0; b < batch; ++b) {
    const AttentionMask& m = masks.size() == 1 ? *masks[0] : *masks[b];
    for (long i = 0; i < t_len; ++i) {
      long qi = b * t_len + i;
      const double* qrow = q->data.data() + static_cast<size_t>(qi) * d;
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j <= i; ++j) {
        if (!m.allowed(i, j)) continue;
        const double* krow = k->data.data() + static_cast<size_t>(b * t_len + j) * d;
        double s = 0.0;
        for (long c = 0; c < d; ++c) s += qrow[c] * krow[c];
        if (pe.has()) s += qwk[static_cast<size_t>(qi) * n_buckets + std::min(i - j, pe.l_max)];
        logits[j] = s * inv_sqrt_d;
        mx = std::max(mx, logits[j]);
      }
      if (!std::isfinite(mx)) continue;  // no keys allowed: output row stays zero
      double denom = 0.0;
      for (long j = 0; j <= i; ++j) {
        if (!m.allowed(i, j)) continue;
        logits[j] = std::exp(logits[j] - mx);
        denom += logits[j];
      }
      double* arow = alpha->data() + (static_cast<size_t>(b) * t_len + i) * t_len;
      double* orow = out->data.data() + static_cast<size_t>(qi) * d;
      double* abrow = abar->data() + static_cast<size_t>(qi) * n_buckets;
      for (long j = 0; j <= i; ++j) {
        if (!m.allowed(i, j)) continue;
        double a = logits[j] / denom;
        arow[j] = a;
        if (dropping) {
          bool keep = drop.rng->uniform() >= drop.p;
          (*kept)[(static_cast<size_t>(b) * t_len + i) * t_len + j] = keep;
          if (!keep) continue;
          a *= keep_scale;
        }
        const double* vrow = v->data.data() + static_cast<size_t>(b * t_len + j) * d;
        for (long c = 0; c < d; ++c) orow[c] += a * vrow[c];
        if (pe.has()) abrow[std::min(i - j, pe.l_max)] += a;
      }
    }
  }
  if (pe.has())
    acc_mm_nn(abar->data(), pe.values->data.data(), out->data.data(), q->rows(), n_buckets, d);
  maybe_check_finite(out, "rel_attention_core");

  bool any_grad = q->requires_grad || k->requires_grad || v->requires_grad ||
                  (pe.has() && (pe.keys->requires_grad || pe.values->requires_grad));
  if (tape.recording && any_grad) {
    mark_output(tape, out);
    TensorPtr wk = pe.keys, wv = pe.values;
    long l_max = pe.l_max;
    std::vector<const AttentionMask*> msk = masks;
    tape.record([q, k, v, wk, wv, out, alpha, kept, abar, msk, batch, t_len, d, n_buckets, l_max,
                 inv_sqrt_d, keep_scale, dropping] {
      q->ensure_grad();
      k->ensure_grad();
      v->ensure_grad();
      bool pe_on = wk != nullptr;
      // out += abar @ w_values, so d(w_values) = abar^T @ d(out).
      if (pe_on && wv->requires_grad) {
        wv->ensure_grad();
        acc_mm_tn(abar->data(), out->grad.data(), wv->grad.data(), q->rows(), n_buckets, d);
      }
      std::vector<double> dalpha(t_len);
      std::vector<double> dlbar(pe_on ? static_cast<size_t>(q->rows()) * n_buckets : 0, 0.0);
      for (long b = 0; b < batch; ++b) {
        const AttentionMask& m = msk.size() == 1 ? *msk[0] : *msk[b];
        for (long i = 0; i < t_len; ++i) {
          long qi = b * t_len + i;
          const double* grow = out->grad.data() + static_cast<size_t>(qi) * d;
          const double* arow = alpha->data() + (static_cast<size_t>(b) * t_len + i) * t_len;
          const uint8_t* keeprow =
              dropping ? kept->data() + (static_cast<size_t>(b) * t_len + i) * t_len : nullptr;
          // Pass 1: gradient w.r.t. the post-dropout weight of each key is
          // d(out_i) . (v_j + w_values[dist]); dropout backward scales kept
          // entries by 1/(1-p) and zeroes dropped ones. Value rows collect
          // their share here too.
          double dot = 0.0;
          for (long j = 0; j <= i; ++j) {
            if (!m.allowed(i, j)) continue;
            const double* vrow = v->data.data() + static_cast<size_t>(b * t_len + j) * d;
            double g = 0.0;
            for (long c = 0; c < d; ++c) g += grow[c] * vrow[c];
            if (pe_on) {
              const double* wvrow =
                  wv->data.data() + static_cast<size_t>(std::min(i - j, l_max)) * d;
              for (long c = 0; c < d; ++c) g += grow[c] * wvrow[c];
            }
            if (dropping) g = keeprow[j] ? g * keep_scale : 0.0;
            if (v->requires_grad) {
              double a_post = dropping ? (keeprow[j] ? arow[j] * keep_scale : 0.0) : arow[j];
              if (a_post != 0.0) {
                double* vg = v->grad.data() + static_cast<size_t>(b * t_len + j) * d;
                for (long c = 0; c < d; ++c) vg[c] += a_post * grow[c];
              }
            }
            dalpha[j] = g;
            dot += arow[j] * g;  // softmax coupling uses pre-dropout weights
          }
          // Pass 2: softmax backward gives the score gradients, which then
          // split between q, k and the key offset table.
          const double* qrow = q->data.data() + static_cast<size_t>(qi) * d;
          double* qg = q->grad.data() + static_cast<size_t>(qi) * d;
          for (long j = 0; j <= i; ++j) {
            if (!m.allowed(i, j)) continue;
            double dl = arow[j] * (dalpha[j] - dot) * inv_sqrt_d;
            if (dl == 0.0) continue;
            const double* krow = k->data.data() + static_cast<size_t>(b * t_len + j) * d;
            if (q->requires_grad) {
              for (long c = 0; c < d; ++c) qg[c] += dl * krow[c];
              if (pe_on) {
                const double* wkrow =
                    wk->data.data() + static_cast<size_t>(std::min(i - j, l_max)) * d;
                for (long c = 0; c < d; ++c) qg[c] += dl * wkrow[c];
              }
            }
            if (k->requires_grad) {
              double* kg = k->grad.data() + static_cast<size_t>(b * t_len + j) * d;
              for (long c = 0; c < d; ++c) kg[c] += dl * qrow[c];
            }
            if (pe_on) dlbar[static_cast<size_t>(qi) * n_buckets + std::min(i - j, l_max)] += dl;
          }
        }
      }
      if (pe_on && wk->requires_grad) {
        wk->ensure_grad();
        acc_mm_tn(dlbar.data(), q->data.data(), wk->grad.data(), q->rows(), n_buckets, d);
      }
    });
  }
  return out;
}

}  // namespace detail

// Multi-head attention over flattened (batch * t) x d_h streams. `masks`
// holds either one shared mask or one per batch element; the pointed-to masks
// must stay alive until backward has run (the tape captures the pointers, not
// copies). Output columns are the head outputs concatenated in head order (no
// output projection).
inline TensorPtr attend_relative(Tape& tape, const TensorPtr& h_q, const TensorPtr& h_kv,
                                 const std::vector<HeadParams>& heads, const RelPosTable& pe,
                                 const std::vector<const AttentionMask*>& masks,
                                 const AttnDropout& drop = {}, long batch = 1) {
  if (heads.empty()) throw std::invalid_argument("attend_relative: no heads");
  if (batch <= 0 || h_q->rows() % batch != 0)
    throw std::invalid_argument("attend_relative: rows not divisible by batch");
  if (h_q->rows() != h_kv->rows())
    throw std::invalid_argument("attend_relative: query/key streams must share one timeline");
  if (masks.size() != 1 && masks.size() != static_cast<size_t>(batch))
    throw std::invalid_argument("attend_relative: need one mask or one per batch element");
  long t_len = h_q->rows() / batch;
  for (const auto* m : masks) {
    if (m->t_q != t_len || m->t_k != t_len)
      throw std::invalid_argument("attend_relative: mask shape does not match sequence length");
    detail::validate_causal(*m);
  }
  if (drop.p > 0.0 && drop.training && drop.rng == nullptr)
    throw std::invalid_argument("attend_relative: attentional dropout needs an rng");

  std::vector<TensorPtr> outs;
  outs.reserve(heads.size());
  for (const auto& head : heads) {
    if (pe.has() && head.w_q->cols() != pe.keys->cols())
      throw std::invalid_argument("attend_relative: PE table width differs from d_qkv");
    auto q = affine(tape, h_q, head.w_q, head.b_q);
    auto k = affine(tape, h_kv, head.w_k, head.b_k);
    auto v = affine(tape, h_kv, head.w_v, head.b_v);
    outs.push_back(detail::rel_attention_core(tape, q, k, v, pe, masks, batch, drop));
  }
  return outs.size() == 1 ? outs[0] : concat_cols(tape, outs);
}

}  // namespace cfseq
