#pragma once
// Small dense regression toolkit: Cholesky solves, binary logistic regression
// by damped Newton, weighted ridge least squares, and multinomial softmax
// regression. Everything is closed-form or full-batch second order; the
// design matrices in this project are at most a few dozen columns.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfseq {

// Cholesky-solve the SPD system a x = b, both row-major, a consumed in place.
// Optionally reports the extreme pivots so callers can flag conditioning.
inline std::vector<double> solve_spd(std::vector<double> a, std::vector<double> b, long n,
                                     double* pivot_min = nullptr, double* pivot_max = nullptr) {
  if (static_cast<long>(a.size()) != n * n || static_cast<long>(b.size()) != n)
    throw std::invalid_argument("solve_spd: dimension mismatch");
  double pmin = 0.0, pmax = 0.0;
  for (long j = 0; j < n; ++j) {
    double diag = a[j * n + j];
    for (long k = 0; k < j; ++k) diag -= a[j * n + k] * a[j * n + k];
    if (!(diag > 0.0)) throw std::runtime_error("solve_spd: matrix not positive definite");
    double l = std::sqrt(diag);
    a[j * n + j] = l;
    if (j == 0 || l < pmin) pmin = l;
    if (j == 0 || l > pmax) pmax = l;
    for (long i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (long k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / l;
    }
  }
  if (pivot_min) *pivot_min = pmin;
  if (pivot_max) *pivot_max = pmax;
  // Forward then backward substitution with the factor stored in a's lower
  // triangle.
  for (long i = 0; i < n; ++i) {
    double s = b[i];
    for (long k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (long i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (long k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return b;
}

inline double dot_row(const double* a, const double* b, long d) {
  double s = 0.0;
  for (long j = 0; j < d; ++j) s += a[j] * b[j];
  return s;
}

// log(1 + exp(z)) without overflow.
inline double log1p_exp(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

struct LogisticOptions {
  double ridge = 0.0;
  long max_iters = 500;
  double grad_tol = 1e-6;         // on the mean-gradient inf-norm
  double sep_weight_limit = 30.0; // |w| beyond this reads as separation
  double sep_ridge = 1e-4;        // regularization of the fallback refit
};

struct LogisticFit {
  std::vector<double> w;
  long iters = 0;
  double grad_norm = 0.0;
  bool converged = false;
  bool separation = false; // refit with sep_ridge after divergence
};

inline double logistic_prob(const std::vector<double>& w, const double* row) {
  double z = dot_row(w.data(), row, static_cast<long>(w.size()));
  return 1.0 / (1.0 + std::exp(-z));
}

namespace detail {

// Mean negative log-likelihood plus the ridge term.
inline double logistic_nll(const std::vector<double>& x, const std::vector<double>& y, long n,
                           long d, const std::vector<double>& w, double ridge) {
  double s = 0.0;
  for (long i = 0; i < n; ++i) {
    double z = dot_row(x.data() + i * d, w.data(), d);
    s += log1p_exp(z) - y[i] * z;
  }
  s /= static_cast<double>(n);
  for (long j = 0; j < d; ++j) s += 0.5 * ridge * w[j] * w[j];
  return s;
}

inline LogisticFit fit_logistic_once(const std::vector<double>& x, const std::vector<double>& y,
                                     long n, long d, const LogisticOptions& opt,
                                     bool check_separation) {
  LogisticFit fit;
  fit.w.assign(d, 0.0);
  std::vector<double> grad(d), hess(d * d), probs(n);
  double nll = logistic_nll(x, y, n, d, fit.w, opt.ridge);
  for (long it = 0; it < opt.max_iters; ++it) {
    fit.iters = it + 1;
    for (long i = 0; i < n; ++i) {
      double z = dot_row(x.data() + i * d, fit.w.data(), d);
      probs[i] = 1.0 / (1.0 + std::exp(-z));
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    std::fill(hess.begin(), hess.end(), 0.0);
    for (long i = 0; i < n; ++i) {
      const double* row = x.data() + i * d;
      double r = probs[i] - y[i];
      double h = probs[i] * (1.0 - probs[i]);
      for (long j = 0; j < d; ++j) {
        grad[j] += r * row[j];
        for (long k = 0; k <= j; ++k) hess[j * d + k] += h * row[j] * row[k];
      }
    }
    double gn = 0.0;
    for (long j = 0; j < d; ++j) {
      grad[j] = grad[j] / static_cast<double>(n) + opt.ridge * fit.w[j];
      gn = std::max(gn, std::fabs(grad[j]));
    }
    fit.grad_norm = gn;
    if (gn < opt.grad_tol) {
      fit.converged = true;
      return fit;
    }
    for (long j = 0; j < d; ++j) {
      for (long k = 0; k <= j; ++k) {
        double v = hess[j * d + k] / static_cast<double>(n) + (j == k ? opt.ridge : 0.0);
        hess[j * d + k] = v;
        hess[k * d + j] = v;
      }
    }
    // Newton direction, with a gradient-descent fallback when the Hessian is
    // effectively singular (e.g. constant features at ridge 0).
    std::vector<double> dir;
    std::vector<double> rhs(d);
    for (long j = 0; j < d; ++j) rhs[j] = -grad[j];
    try {
      dir = solve_spd(hess, rhs, d);
    } catch (const std::runtime_error&) {
      dir = rhs;
    }
    double slope = dot_row(grad.data(), dir.data(), d);
    if (slope >= 0.0) { // not a descent direction; fall back
      for (long j = 0; j < d; ++j) dir[j] = -grad[j];
      slope = -dot_row(grad.data(), grad.data(), d);
    }
    // Backtracking line search (halving).
    double step = 1.0;
    std::vector<double> trial(d);
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (long j = 0; j < d; ++j) trial[j] = fit.w[j] + step * dir[j];
      double cand = logistic_nll(x, y, n, d, trial, opt.ridge);
      if (cand <= nll + 1e-4 * step * slope) {
        fit.w = trial;
        nll = cand;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) return fit; // stuck at numerical precision
    if (check_separation) {
      for (long j = 0; j < d; ++j) {
        if (std::fabs(fit.w[j]) > opt.sep_weight_limit) {
          fit.separation = true;
          return fit;
        }
      }
    }
  }
  return fit;
}

} // namespace detail

// Binary logistic regression: damped Newton with line search, capped
// iterations. Divergence of the weights or failure to converge at ridge 0 is
// read as (quasi-)separation and answered with a flagged ridge refit.
inline LogisticFit fit_logistic(const std::vector<double>& x, const std::vector<double>& y, long n,
                                long d, LogisticOptions opt = {}) {
  if (n <= 0 || d <= 0 || static_cast<long>(x.size()) != n * d ||
      static_cast<long>(y.size()) != n)
    throw std::invalid_argument("fit_logistic: dimension mismatch");
  for (long i = 0; i < n; ++i)
    if (y[i] != 0.0 && y[i] != 1.0)
      throw std::invalid_argument("fit_logistic: labels must be 0 or 1");
  // Constant labels are complete separation: the MLE diverges, so go straight
  // to the flagged ridge refit.
  bool constant = true;
  for (long i = 1; i < n && constant; ++i) constant = y[i] == y[0];
  if (constant) {
    LogisticOptions fallback = opt;
    fallback.ridge = opt.sep_ridge;
    LogisticFit refit = detail::fit_logistic_once(x, y, n, d, fallback, false);
    refit.separation = true;
    return refit;
  }
  LogisticFit fit = detail::fit_logistic_once(x, y, n, d, opt, /*check_separation=*/true);
  if (fit.separation || (!fit.converged && opt.ridge == 0.0)) {
    LogisticOptions fallback = opt;
    fallback.ridge = opt.sep_ridge;
    LogisticFit refit = detail::fit_logistic_once(x, y, n, d, fallback, false);
    refit.separation = true;
    return refit;
  }
  return fit;
}

// Same fit on a z-scored design (column 0 is assumed to be the intercept and
// is left alone), with the coefficients folded back to the raw feature scale.
// The point of the standardization is that `ridge` then acts on a coherent
// scale: it damps low-information directions (near-collinear column pairs
// whose coefficients are otherwise pure leverage noise) while leaving
// well-populated directions essentially untouched.
inline LogisticFit fit_logistic_standardized(const std::vector<double>& x,
                                             const std::vector<double>& y, long n, long d,
                                             double ridge, LogisticOptions opt = {}) {
  if (n <= 0 || d <= 0 || static_cast<long>(x.size()) != n * d)
    throw std::invalid_argument("fit_logistic_standardized: dimension mismatch");
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (long i = 0; i < n; ++i)
    for (long j = 1; j < d; ++j) mean[j] += x[i * d + j];
  for (long j = 1; j < d; ++j) mean[j] /= static_cast<double>(n);
  for (long i = 0; i < n; ++i)
    for (long j = 1; j < d; ++j) {
      double c = x[i * d + j] - mean[j];
      sd[j] += c * c;
    }
  for (long j = 1; j < d; ++j) {
    sd[j] = std::sqrt(sd[j] / static_cast<double>(n));
    if (sd[j] < 1e-12) sd[j] = 1.0; // constant column: dead after centering
  }
  std::vector<double> z(n * d);
  for (long i = 0; i < n; ++i) {
    z[i * d] = x[i * d];
    for (long j = 1; j < d; ++j) z[i * d + j] = (x[i * d + j] - mean[j]) / sd[j];
  }
  opt.ridge = ridge;
  LogisticFit fit = fit_logistic(z, y, n, d, opt);
  // Fold back: w_raw[j] = w[j]/sd[j], intercept absorbs the centering.
  double shift = 0.0;
  for (long j = 1; j < d; ++j) {
    double wj = fit.w[j] / sd[j];
    shift += wj * mean[j];
    fit.w[j] = wj;
  }
  fit.w[0] -= shift;
  return fit;
}

struct WlsFit {
  std::vector<double> w;
  // (max pivot / min pivot)^2 of the Cholesky factor: a cheap lower bound on
  // the condition number of the normal equations, recorded for diagnostics.
  double cond_proxy = 0.0;
};

// Weighted least squares with an L2 ridge: solves (X'WX + ridge I) w = X'Wy.
inline WlsFit ridge_wls(const std::vector<double>& x, const std::vector<double>& y,
                        const std::vector<double>& wts, long n, long d, double ridge) {
  if (n <= 0 || d <= 0 || static_cast<long>(x.size()) != n * d ||
      static_cast<long>(y.size()) != n || static_cast<long>(wts.size()) != n)
    throw std::invalid_argument("ridge_wls: dimension mismatch");
  std::vector<double> a(d * d, 0.0), b(d, 0.0);
  for (long i = 0; i < n; ++i) {
    const double* row = x.data() + i * d;
    double wi = wts[i];
    for (long j = 0; j < d; ++j) {
      b[j] += wi * row[j] * y[i];
      for (long k = 0; k <= j; ++k) a[j * d + k] += wi * row[j] * row[k];
    }
  }
  for (long j = 0; j < d; ++j) {
    a[j * d + j] += ridge;
    for (long k = j + 1; k < d; ++k) a[j * d + k] = a[k * d + j];
  }
  WlsFit fit;
  double pmin = 0.0, pmax = 0.0;
  fit.w = solve_spd(std::move(a), std::move(b), d, &pmin, &pmax);
  fit.cond_proxy = (pmax / pmin) * (pmax / pmin);
  return fit;
}

struct SoftmaxFit {
  std::vector<double> w; // k x d, row per class
  long iters = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

inline void softmax_probs(const std::vector<double>& w, const double* row, long d, long k,
                          double* out) {
  double zmax = -1e300;
  for (long c = 0; c < k; ++c) {
    out[c] = dot_row(w.data() + c * d, row, d);
    zmax = std::max(zmax, out[c]);
  }
  double z = 0.0;
  for (long c = 0; c < k; ++c) {
    out[c] = std::exp(out[c] - zmax);
    z += out[c];
  }
  for (long c = 0; c < k; ++c) out[c] /= z;
}

// Multinomial logistic regression by full Newton on the stacked (k*d) system.
// The ridge both regularizes and removes the softmax gauge degeneracy, so the
// Hessian is positive definite.
inline SoftmaxFit fit_softmax(const std::vector<double>& x, const std::vector<long>& labels,
                              long n, long d, long k, double ridge = 1e-6, long max_iters = 200,
                              double grad_tol = 1e-7) {
  if (n <= 0 || d <= 0 || k < 2 || static_cast<long>(x.size()) != n * d ||
      static_cast<long>(labels.size()) != n)
    throw std::invalid_argument("fit_softmax: dimension mismatch");
  for (long i = 0; i < n; ++i)
    if (labels[i] < 0 || labels[i] >= k)
      throw std::invalid_argument("fit_softmax: label out of range");
  if (!(ridge > 0.0)) throw std::invalid_argument("fit_softmax: ridge must be positive");

  long m = k * d;
  SoftmaxFit fit;
  fit.w.assign(m, 0.0);
  std::vector<double> p(k), grad(m), hess(m * m), dir(m), trial(m);
  auto nll_of = [&](const std::vector<double>& w) {
    double s = 0.0;
    for (long i = 0; i < n; ++i) {
      softmax_probs(w, x.data() + i * d, d, k, p.data());
      s -= std::log(std::max(p[labels[i]], 1e-300));
    }
    s /= static_cast<double>(n);
    for (long j = 0; j < m; ++j) s += 0.5 * ridge * w[j] * w[j];
    return s;
  };
  double nll = nll_of(fit.w);
  for (long it = 0; it < max_iters; ++it) {
    fit.iters = it + 1;
    std::fill(grad.begin(), grad.end(), 0.0);
    std::fill(hess.begin(), hess.end(), 0.0);
    for (long i = 0; i < n; ++i) {
      const double* row = x.data() + i * d;
      softmax_probs(fit.w, row, d, k, p.data());
      for (long c = 0; c < k; ++c) {
        double r = p[c] - (labels[i] == c ? 1.0 : 0.0);
        for (long j = 0; j < d; ++j) grad[c * d + j] += r * row[j];
        for (long c2 = 0; c2 < k; ++c2) {
          double h = p[c] * ((c == c2 ? 1.0 : 0.0) - p[c2]);
          if (h == 0.0) continue;
          for (long j = 0; j < d; ++j) {
            double hj = h * row[j];
            for (long j2 = 0; j2 < d; ++j2) hess[(c * d + j) * m + c2 * d + j2] += hj * row[j2];
          }
        }
      }
    }
    double gn = 0.0;
    for (long j = 0; j < m; ++j) {
      grad[j] = grad[j] / static_cast<double>(n) + ridge * fit.w[j];
      gn = std::max(gn, std::fabs(grad[j]));
    }
    fit.grad_norm = gn;
    if (gn < grad_tol) {
      fit.converged = true;
      return fit;
    }
    for (long j = 0; j < m; ++j) {
      for (long j2 = 0; j2 < m; ++j2) hess[j * m + j2] /= static_cast<double>(n);
      hess[j * m + j] += ridge;
    }
    std::vector<double> rhs(m);
    for (long j = 0; j < m; ++j) rhs[j] = -grad[j];
    try {
      dir = solve_spd(hess, rhs, m);
    } catch (const std::runtime_error&) {
      dir = rhs;
    }
    double slope = dot_row(grad.data(), dir.data(), m);
    if (slope >= 0.0) {
      for (long j = 0; j < m; ++j) dir[j] = -grad[j];
      slope = -dot_row(grad.data(), grad.data(), m);
    }
    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (long j = 0; j < m; ++j) trial[j] = fit.w[j] + step * dir[j];
      double cand = nll_of(trial);
      if (cand <= nll + 1e-4 * step * slope) {
        fit.w = trial;
        nll = cand;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) return fit;
  }
  return fit;
}

} // namespace cfseq
