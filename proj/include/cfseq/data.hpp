#pragma once
// Shared data containers: patient trajectories and feature standardization.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace cfseq {

// One patient: per-step covariates, categorical treatment ids, outcomes, and
// static covariates. Treatment a[t] is the one applied at step t (it affects
// y[t+1]); x[t] and y[t] are observed before a[t] is chosen.
struct Trajectory {
  std::vector<double> x;  // t_len * d_x, row-major
  std::vector<long> a;    // t_len ids in [0, d_a)
  std::vector<double> y;  // t_len * d_y
  std::vector<double> v;  // d_v statics

  long t_len(long d_y = 1) const { return static_cast<long>(y.size()) / d_y; }
};

// Per-feature z-scoring fitted on the training split. Constant features keep
// sd 1 via the floor so they pass through shifted but not blown up.
struct Scaler {
  std::vector<double> x_mean, x_sd;
  std::vector<double> y_mean, y_sd;
  std::vector<double> v_mean, v_sd;
};

inline Scaler fit_scaler(const std::vector<Trajectory>& trajs, long d_x, long d_y, long d_v,
                         double sd_floor = 1e-8) {
  if (trajs.empty()) throw std::invalid_argument("fit_scaler: no trajectories");
  Scaler s;
  auto fit = [&](long d, auto&& get_count, auto&& get_value, std::vector<double>& mean,
                 std::vector<double>& sd) {
    mean.assign(d, 0.0);
    sd.assign(d, 0.0);
    long n = 0;
    for (const auto& tr : trajs) {
      long rows = get_count(tr);
      n += rows;
      for (long r = 0; r < rows; ++r)
        for (long j = 0; j < d; ++j) mean[j] += get_value(tr, r, j);
    }
    for (long j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
    for (const auto& tr : trajs) {
      long rows = get_count(tr);
      for (long r = 0; r < rows; ++r)
        for (long j = 0; j < d; ++j) {
          double c = get_value(tr, r, j) - mean[j];
          sd[j] += c * c;
        }
    }
    for (long j = 0; j < d; ++j) sd[j] = std::max(std::sqrt(sd[j] / static_cast<double>(n)), sd_floor);
  };
  fit(d_x, [&](const Trajectory& t) { return static_cast<long>(t.x.size()) / d_x; },
      [&](const Trajectory& t, long r, long j) { return t.x[r * d_x + j]; }, s.x_mean, s.x_sd);
  fit(d_y, [&](const Trajectory& t) { return static_cast<long>(t.y.size()) / d_y; },
      [&](const Trajectory& t, long r, long j) { return t.y[r * d_y + j]; }, s.y_mean, s.y_sd);
  fit(d_v, [](const Trajectory&) { return 1L; },
      [&](const Trajectory& t, long, long j) { return t.v[j]; }, s.v_mean, s.v_sd);
  return s;
}

inline Trajectory scale_trajectory(const Trajectory& t, const Scaler& s) {
  Trajectory out = t;
  long d_x = static_cast<long>(s.x_mean.size());
  long d_y = static_cast<long>(s.y_mean.size());
  long d_v = static_cast<long>(s.v_mean.size());
  for (size_t i = 0; i < out.x.size(); ++i) out.x[i] = (out.x[i] - s.x_mean[i % d_x]) / s.x_sd[i % d_x];
  for (size_t i = 0; i < out.y.size(); ++i) out.y[i] = (out.y[i] - s.y_mean[i % d_y]) / s.y_sd[i % d_y];
  for (long j = 0; j < d_v; ++j) out.v[j] = (out.v[j] - s.v_mean[j]) / s.v_sd[j];
  return out;
}

inline std::vector<Trajectory> scale_trajectories(const std::vector<Trajectory>& ts, const Scaler& s) {
  std::vector<Trajectory> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(scale_trajectory(t, s));
  return out;
}

inline double unscale_y(double y_scaled, const Scaler& s, long j = 0) {
  return y_scaled * s.y_sd[j] + s.y_mean[j];
}
inline double scale_y(double y_raw, const Scaler& s, long j = 0) {
  return (y_raw - s.y_mean[j]) / s.y_sd[j];
}

}  // namespace cfseq
