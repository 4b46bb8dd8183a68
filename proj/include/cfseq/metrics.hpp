#pragma once
// Evaluation metrics and the record type persisted by the experiment
// harness. Errors are reported as RMSE divided by the maximum tumor volume;
// the tables multiply by 100 so the numbers land on the usual percent scale.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfseq {

// Incremental squared-error accumulator; add prediction/truth pairs from
// however many batches, read the RMSE once at the end.
struct ErrorAccum {
  double sum_sq = 0.0;
  long n = 0;

  void add(double pred, double truth) {
    double e = pred - truth;
    sum_sq += e * e;
    ++n;
  }
  double rmse() const {
    if (n == 0) throw std::invalid_argument("ErrorAccum: no samples");
    return std::sqrt(sum_sq / static_cast<double>(n));
  }
};

inline double normalized_rmse(const std::vector<double>& predictions,
                              const std::vector<double>& truths, double v_max) {
  if (predictions.empty()) throw std::invalid_argument("normalized_rmse: empty input");
  if (predictions.size() != truths.size())
    throw std::invalid_argument("normalized_rmse: size mismatch");
  if (!(v_max > 0.0)) throw std::invalid_argument("normalized_rmse: v_max must be positive");
  ErrorAccum acc;
  for (size_t i = 0; i < predictions.size(); ++i) acc.add(predictions[i], truths[i]);
  return acc.rmse() / v_max;
}

// One evaluation result: a method's normalized counterfactual RMSE at one
// projection horizon, for one dataset/model seed.
struct MetricsRecord {
  std::string method;
  double gamma = 0.0;
  long tau = 0;
  uint64_t seed = 0;
  double nrmse = 0.0;  // fraction of v_max; multiply by 100 for table units
  double wall_seconds = 0.0;
};

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;  // standard error of the mean; 0 for a single value
};

inline MeanSe mean_and_se(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_and_se: empty input");
  MeanSe r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    double var = ss / static_cast<double>(values.size() - 1);
    r.se = std::sqrt(var / static_cast<double>(values.size()));
  }
  return r;
}

}  // namespace cfseq
