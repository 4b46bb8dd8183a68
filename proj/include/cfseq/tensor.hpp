#pragma once
// Dense float64 matrices with reverse-mode automatic differentiation.
//
// A Tape records one node per differentiable operation as it executes
// (define-by-run). backward() seeds d(loss)/d(loss) = 1 and walks the
// recording in reverse; each node adds its contribution into the gradient
// buffers of its inputs. There is no graph rewriting, buffer reuse or
// implicit broadcasting: shapes are plain (rows x cols) matrices and every
// mismatch is a hard error.
//
// Conventions shared by all ops:
//   * tensors are immutable once produced; ops allocate fresh outputs
//   * an output requires grad iff some input does and the tape is recording
//   * gradients accumulate with +=, so a tensor consumed twice is handled
//   * one backward() per recording; clear or discard the tape between steps

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfseq/rng.hpp"

namespace cfseq {

class Tensor {
 public:
  Tensor(long rows, long cols, bool requires_grad_ = false)
      : requires_grad(requires_grad_), rows_(rows), cols_(cols) {
    if (rows <= 0 || cols <= 0)
      throw std::invalid_argument("Tensor: dimensions must be positive, got " +
                                  std::to_string(rows) + "x" + std::to_string(cols));
    data.assign(static_cast<size_t>(rows) * static_cast<size_t>(cols), 0.0);
    if (requires_grad) grad.assign(data.size(), 0.0);
  }

  long rows() const { return rows_; }
  long cols() const { return cols_; }
  size_t size() const { return data.size(); }

  double at(long r, long c) const { return data[static_cast<size_t>(r) * cols_ + c]; }
  double& at(long r, long c) { return data[static_cast<size_t>(r) * cols_ + c]; }
  double& gat(long r, long c) { return grad[static_cast<size_t>(r) * cols_ + c]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), 0.0);
  }

  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad;

 private:
  long rows_, cols_;
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr tensor(long rows, long cols, bool requires_grad = false) {
  return std::make_shared<Tensor>(rows, cols, requires_grad);
}

inline TensorPtr tensor_from(long rows, long cols, const std::vector<double>& values,
                             bool requires_grad = false) {
  auto t = tensor(rows, cols, requires_grad);
  if (values.size() != t->size())
    throw std::invalid_argument("tensor_from: value count does not match shape");
  t->data = values;
  return t;
}

inline TensorPtr tensor_of(long rows, long cols, std::initializer_list<double> values,
                           bool requires_grad = false) {
  return tensor_from(rows, cols, std::vector<double>(values), requires_grad);
}

// Forward outputs are checked for NaN/Inf when enabled (tests switch this on;
// the training loop checks loss scalars itself, so the per-op sweep stays
// opt-in for the hot path).
inline bool& finite_checks() {
  static bool enabled = false;
  return enabled;
}

inline void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw std::runtime_error(std::string(what) + ": non-finite value produced");
}

inline void maybe_check_finite(const TensorPtr& t, const char* what) {
  if (finite_checks()) check_finite(*t, what);
}

class Tape {
 public:
  bool recording = true;

  void record(std::function<void()> back) {
    nodes_.push_back(std::move(back));
  }

  size_t node_count() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

inline bool taping(const Tape& tape, const TensorPtr& a) {
  return tape.recording && a->requires_grad;
}
inline bool taping(const Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  return tape.recording && (a->requires_grad || b->requires_grad);
}

inline void mark_output(Tape& tape, const TensorPtr& out) {
  out->requires_grad = true;
  out->ensure_grad();
  (void)tape;
}

// Seeds d(loss)/d(loss) = 1 and replays the recording in reverse. After the
// call every requires-grad tensor that the loss depends on has its grad
// populated. Call once per recording.
inline void backward(Tape& tape, const TensorPtr& loss) {
  if (loss->size() != 1) throw std::invalid_argument("backward: loss must be a 1x1 tensor");
  if (!loss->requires_grad)
    throw std::invalid_argument("backward: loss does not require grad (nothing recorded?)");
  loss->ensure_grad();
  loss->grad[0] = 1.0;
  tape.run_backward();
}

// ---- raw kernels ----------------------------------------------------------
// All three accumulate into c, so the same kernels serve forward passes (into
// freshly zeroed buffers) and gradient accumulation.

// c(m x n) += a(m x k) * b(k x n)
inline void acc_mm_nn(const double* a, const double* b, double* c, long m, long k, long n) {
  for (long i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (long kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b + kk * n;
      for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c(m x k) += a(m x n) * b(k x n)^T
inline void acc_mm_nt(const double* a, const double* b, double* c, long m, long n, long k) {
  for (long i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (long kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      double s = 0.0;
      for (long j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[kk] += s;
    }
  }
}

// c(k x n) += a(m x k)^T * b(m x n)
inline void acc_mm_tn(const double* a, const double* b, double* c, long m, long k, long n) {
  for (long i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (long kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      if (av == 0.0) continue;
      double* crow = c + kk * n;
      for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---- ops ------------------------------------------------------------------

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->cols() != b->rows())
    throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a->cols()) +
                                " vs " + std::to_string(b->rows()) + ")");
  long m = a->rows(), k = a->cols(), n = b->cols();
  auto out = tensor(m, n);
  acc_mm_nn(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  maybe_check_finite(out, "matmul");
  if (taping(tape, a, b)) {
    mark_output(tape, out);
    tape.record([a, b, out, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        acc_mm_nt(out->grad.data(), b->data.data(), a->grad.data(), m, n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        acc_mm_tn(a->data.data(), out->grad.data(), b->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

inline void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "add");
  auto out = tensor(a->rows(), a->cols());
  for (size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
  maybe_check_finite(out, "add");
  if (taping(tape, a, b)) {
    mark_output(tape, out);
    tape.record([a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

inline TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "sub");
  auto out = tensor(a->rows(), a->cols());
  for (size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
  maybe_check_finite(out, "sub");
  if (taping(tape, a, b)) {
    mark_output(tape, out);
    tape.record([a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < out->size(); ++i) b->grad[i] -= out->grad[i];
      }
    });
  }
  return out;
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "mul");
  auto out = tensor(a->rows(), a->cols());
  for (size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
  maybe_check_finite(out, "mul");
  if (taping(tape, a, b)) {
    mark_output(tape, out);
    tape.record([a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
      }
    });
  }
  return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& a, double c) {
  auto out = tensor(a->rows(), a->cols());
  for (size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * c;
  maybe_check_finite(out, "scale");
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out, c] {
      a->ensure_grad();
      for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * c;
    });
  }
  return out;
}

inline TensorPtr square(Tape& tape, const TensorPtr& a) {
  auto out = tensor(a->rows(), a->cols());
  for (size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * a->data[i];
  maybe_check_finite(out, "square");
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out] {
      a->ensure_grad();
      for (size_t i = 0; i < out->size(); ++i) a->grad[i] += 2.0 * a->data[i] * out->grad[i];
    });
  }
  return out;
}

// Adds a 1 x d row vector to every row of a (the bias of an affine map).
inline TensorPtr add_rowvec(Tape& tape, const TensorPtr& a, const TensorPtr& v) {
  if (v->rows() != 1 || v->cols() != a->cols())
    throw std::invalid_argument("add_rowvec: v must be 1 x cols(a)");
  auto out = tensor(a->rows(), a->cols());
  long n = a->cols();
  for (long i = 0; i < a->rows(); ++i)
    for (long j = 0; j < n; ++j) out->at(i, j) = a->at(i, j) + v->data[j];
  maybe_check_finite(out, "add_rowvec");
  if (taping(tape, a, v)) {
    mark_output(tape, out);
    tape.record([a, v, out, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (v->requires_grad) {
        v->ensure_grad();
        for (long i = 0; i < out->rows(); ++i)
          for (long j = 0; j < n; ++j) v->grad[j] += out->gat(i, j);
      }
    });
  }
  return out;
}

inline TensorPtr affine(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  return add_rowvec(tape, matmul(tape, x, w), b);
}

// out[i, :] = a[i, :] * weights[i]; the weights are data, not a grad path.
inline TensorPtr scale_rows(Tape& tape, const TensorPtr& a, std::vector<double> weights) {
  if (static_cast<long>(weights.size()) != a->rows())
    throw std::invalid_argument("scale_rows: one weight per row required");
  auto out = tensor(a->rows(), a->cols());
  long n = a->cols();
  for (long i = 0; i < a->rows(); ++i) {
    double w = weights[i];
    for (long j = 0; j < n; ++j) out->at(i, j) = a->at(i, j) * w;
  }
  maybe_check_finite(out, "scale_rows");
  if (taping(tape, a)) {
    mark_output(tape, out);
    auto wgt = std::make_shared<std::vector<double>>(std::move(weights));
    tape.record([a, out, wgt, n] {
      a->ensure_grad();
      for (long i = 0; i < out->rows(); ++i) {
        double w = (*wgt)[i];
        for (long j = 0; j < n; ++j) a->gat(i, j) += out->gat(i, j) * w;
      }
    });
  }
  return out;
}

// Tiles a B x d matrix into a (B * reps) x d matrix, sample-major: row
// b * reps + r copies row b. Used to broadcast per-patient statics over time.
inline TensorPtr repeat_rows(Tape& tape, const TensorPtr& v, long reps) {
  if (reps <= 0) throw std::invalid_argument("repeat_rows: reps must be positive");
  auto out = tensor(v->rows() * reps, v->cols());
  long d = v->cols();
  for (long b = 0; b < v->rows(); ++b)
    for (long r = 0; r < reps; ++r)
      for (long j = 0; j < d; ++j) out->at(b * reps + r, j) = v->at(b, j);
  maybe_check_finite(out, "repeat_rows");
  if (taping(tape, v)) {
    mark_output(tape, out);
    tape.record([v, out, reps, d] {
      v->ensure_grad();
      for (long b = 0; b < v->rows(); ++b)
        for (long r = 0; r < reps; ++r)
          for (long j = 0; j < d; ++j) v->gat(b, j) += out->gat(b * reps + r, j);
    });
  }
  return out;
}

inline TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: nothing to concatenate");
  long rows = parts[0]->rows(), cols = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p->rows() != rows) throw std::invalid_argument("concat_cols: row counts differ");
    cols += p->cols();
    any_grad = any_grad || p->requires_grad;
  }
  auto out = tensor(rows, cols);
  long off = 0;
  for (const auto& p : parts) {
    for (long i = 0; i < rows; ++i)
      for (long j = 0; j < p->cols(); ++j) out->at(i, off + j) = p->at(i, j);
    off += p->cols();
  }
  maybe_check_finite(out, "concat_cols");
  if (tape.recording && any_grad) {
    mark_output(tape, out);
    auto parts_copy = parts;
    tape.record([parts_copy, out, rows] {
      long off = 0;
      for (const auto& p : parts_copy) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (long i = 0; i < rows; ++i)
            for (long j = 0; j < p->cols(); ++j) p->gat(i, j) += out->gat(i, off + j);
        }
        off += p->cols();
      }
    });
  }
  return out;
}

// Selects rows by index; the same row may appear more than once (backward
// scatter-adds).
inline TensorPtr gather_rows(Tape& tape, const TensorPtr& a, std::vector<long> idx) {
  if (idx.empty()) throw std::invalid_argument("gather_rows: empty index list");
  for (long i : idx)
    if (i < 0 || i >= a->rows()) throw std::invalid_argument("gather_rows: index out of range");
  auto out = tensor(static_cast<long>(idx.size()), a->cols());
  long n = a->cols();
  for (size_t r = 0; r < idx.size(); ++r)
    for (long j = 0; j < n; ++j) out->at(static_cast<long>(r), j) = a->at(idx[r], j);
  maybe_check_finite(out, "gather_rows");
  if (taping(tape, a)) {
    mark_output(tape, out);
    auto ids = std::make_shared<std::vector<long>>(std::move(idx));
    tape.record([a, out, ids, n] {
      a->ensure_grad();
      for (size_t r = 0; r < ids->size(); ++r)
        for (long j = 0; j < n; ++j) a->gat((*ids)[r], j) += out->gat(static_cast<long>(r), j);
    });
  }
  return out;
}

enum class Act { Relu, Elu, Sigmoid };

inline TensorPtr activation(Tape& tape, const TensorPtr& a, Act kind) {
  auto out = tensor(a->rows(), a->cols());
  switch (kind) {
    case Act::Relu:
      for (size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
      break;
    case Act::Elu:
      for (size_t i = 0; i < a->size(); ++i)
        out->data[i] = a->data[i] > 0.0 ? a->data[i] : std::expm1(a->data[i]);
      break;
    case Act::Sigmoid:
      for (size_t i = 0; i < a->size(); ++i) out->data[i] = 1.0 / (1.0 + std::exp(-a->data[i]));
      break;
  }
  maybe_check_finite(out, "activation");
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out, kind] {
      a->ensure_grad();
      switch (kind) {
        case Act::Relu:
          for (size_t i = 0; i < a->size(); ++i)
            if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
          break;
        case Act::Elu:
          for (size_t i = 0; i < a->size(); ++i)
            a->grad[i] += out->grad[i] * (a->data[i] > 0.0 ? 1.0 : out->data[i] + 1.0);
          break;
        case Act::Sigmoid:
          for (size_t i = 0; i < a->size(); ++i)
            a->grad[i] += out->grad[i] * out->data[i] * (1.0 - out->data[i]);
          break;
      }
    });
  }
  return out;
}

// Row-wise softmax with an optional boolean keep-mask (1 = participates).
// Masked entries receive probability exactly zero: they are skipped outright,
// which is arithmetically identical to giving them a -1e30 logit (their
// exp underflows to 0) but cannot disturb the row maximum. A fully masked
// row has no meaningful normalization and is treated as a caller error.
inline TensorPtr softmax_rows(Tape& tape, const TensorPtr& a,
                              const std::vector<uint8_t>* keep = nullptr) {
  if (keep && static_cast<long>(keep->size()) != a->rows() * a->cols())
    throw std::invalid_argument("softmax_rows: mask shape mismatch");
  auto out = tensor(a->rows(), a->cols());
  long n = a->cols();
  for (long i = 0; i < a->rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (long j = 0; j < n; ++j)
      if (!keep || (*keep)[i * n + j]) mx = std::max(mx, a->at(i, j));
    if (!std::isfinite(mx))
      throw std::domain_error("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double sum = 0.0;
    for (long j = 0; j < n; ++j) {
      if (!keep || (*keep)[i * n + j]) {
        double e = std::exp(a->at(i, j) - mx);
        out->at(i, j) = e;
        sum += e;
      } else {
        out->at(i, j) = 0.0;
      }
    }
    for (long j = 0; j < n; ++j) out->at(i, j) /= sum;
  }
  maybe_check_finite(out, "softmax_rows");
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out, n] {
      a->ensure_grad();
      for (long i = 0; i < a->rows(); ++i) {
        double dot = 0.0;
        for (long j = 0; j < n; ++j) dot += out->at(i, j) * out->gat(i, j);
        for (long j = 0; j < n; ++j)
          a->gat(i, j) += out->at(i, j) * (out->gat(i, j) - dot);
      }
    });
  }
  return out;
}

// Per-row layer normalization with trainable gain/bias (1 x d each):
// out = gamma * (x - mean) / sqrt(var + eps) + beta, variance biased (1/d).
inline TensorPtr layer_norm(Tape& tape, const TensorPtr& a, const TensorPtr& gamma,
                            const TensorPtr& beta, double eps = 1e-5) {
  long d = a->cols();
  if (gamma->rows() != 1 || gamma->cols() != d || beta->rows() != 1 || beta->cols() != d)
    throw std::invalid_argument("layer_norm: gamma/beta must be 1 x cols(a)");
  auto out = tensor(a->rows(), d);
  auto xhat = std::make_shared<std::vector<double>>(a->size());
  auto istd = std::make_shared<std::vector<double>>(a->rows());
  for (long i = 0; i < a->rows(); ++i) {
    double mean = 0.0;
    for (long j = 0; j < d; ++j) mean += a->at(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) {
      double c = a->at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*istd)[i] = is;
    for (long j = 0; j < d; ++j) {
      double xh = (a->at(i, j) - mean) * is;
      (*xhat)[i * d + j] = xh;
      out->at(i, j) = gamma->data[j] * xh + beta->data[j];
    }
  }
  maybe_check_finite(out, "layer_norm");
  if (tape.recording && (a->requires_grad || gamma->requires_grad || beta->requires_grad)) {
    mark_output(tape, out);
    tape.record([a, gamma, beta, out, xhat, istd, d] {
      for (long i = 0; i < a->rows(); ++i) {
        if (a->requires_grad) {
          a->ensure_grad();
          // dL/dx = istd * (g - mean(g) - xhat * mean(g * xhat)), g = dout * gamma
          double gmean = 0.0, gxmean = 0.0;
          for (long j = 0; j < d; ++j) {
            double g = out->gat(i, j) * gamma->data[j];
            gmean += g;
            gxmean += g * (*xhat)[i * d + j];
          }
          gmean /= static_cast<double>(d);
          gxmean /= static_cast<double>(d);
          for (long j = 0; j < d; ++j) {
            double g = out->gat(i, j) * gamma->data[j];
            a->gat(i, j) += (*istd)[i] * (g - gmean - (*xhat)[i * d + j] * gxmean);
          }
        }
        if (gamma->requires_grad) {
          gamma->ensure_grad();
          for (long j = 0; j < d; ++j) gamma->grad[j] += out->gat(i, j) * (*xhat)[i * d + j];
        }
        if (beta->requires_grad) {
          beta->ensure_grad();
          for (long j = 0; j < d; ++j) beta->grad[j] += out->gat(i, j);
        }
      }
    });
  }
  return out;
}

// Inverted dropout: keeps an entry with probability 1 - p and rescales by
// 1 / (1 - p) so the expected value is preserved. p = 0 or eval mode return
// the input tensor unchanged (tensors are immutable, so aliasing is safe).
inline TensorPtr dropout(Tape& tape, const TensorPtr& a, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return a;
  auto out = tensor(a->rows(), a->cols());
  auto mask = std::make_shared<std::vector<uint8_t>>(a->size());
  double inv = 1.0 / (1.0 - p);
  for (size_t i = 0; i < a->size(); ++i) {
    bool keep = rng.uniform() >= p;
    (*mask)[i] = keep;
    out->data[i] = keep ? a->data[i] * inv : 0.0;
  }
  maybe_check_finite(out, "dropout");
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out, mask, inv] {
      a->ensure_grad();
      for (size_t i = 0; i < a->size(); ++i)
        if ((*mask)[i]) a->grad[i] += out->grad[i] * inv;
    });
  }
  return out;
}

// log(max(x, floor)): the clamp guards log(0) when a probability underflows.
// Below the floor the derivative is taken as 0 (the clamp is active).
inline TensorPtr log_floor(Tape& tape, const TensorPtr& a, double floor = 1e-12) {
  if (floor <= 0.0) throw std::invalid_argument("log_floor: floor must be positive");
  auto out = tensor(a->rows(), a->cols());
  for (size_t i = 0; i < a->size(); ++i) out->data[i] = std::log(std::max(a->data[i], floor));
  maybe_check_finite(out, "log_floor");
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out, floor] {
      a->ensure_grad();
      for (size_t i = 0; i < a->size(); ++i)
        if (a->data[i] > floor) a->grad[i] += out->grad[i] / a->data[i];
    });
  }
  return out;
}

inline TensorPtr sum_all(Tape& tape, const TensorPtr& a) {
  auto out = tensor(1, 1);
  double s = 0.0;
  for (double v : a->data) s += v;
  out->data[0] = s;
  maybe_check_finite(out, "sum_all");
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out] {
      a->ensure_grad();
      for (size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
    });
  }
  return out;
}

// Identity forward; backward multiplies the incoming gradient by -lambda.
// This is the reversal trick used by the gradient-reversal training mode.
inline TensorPtr grad_reverse(Tape& tape, const TensorPtr& a, double lambda) {
  auto out = tensor(a->rows(), a->cols());
  out->data = a->data;
  if (taping(tape, a)) {
    mark_output(tape, out);
    tape.record([a, out, lambda] {
      a->ensure_grad();
      for (size_t i = 0; i < a->size(); ++i) a->grad[i] -= lambda * out->grad[i];
    });
  }
  return out;
}

}  // namespace cfseq
