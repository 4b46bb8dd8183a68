#include "cfseq/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cfseq;

TEST(Nrmse, ZeroOnExactPredictions) {
  std::vector<double> y = {3.0, -1.5, 900.0};
  EXPECT_EQ(normalized_rmse(y, y, 1150.0), 0.0);
}

TEST(Nrmse, ConstantErrorEqualsErrorOverVmax) {
  std::vector<double> truths = {10.0, 200.0, 55.0, 0.5};
  std::vector<double> preds;
  for (double t : truths) preds.push_back(t + 5.0);
  EXPECT_DOUBLE_EQ(normalized_rmse(preds, truths, 1150.0), 5.0 / 1150.0);
}

TEST(Nrmse, TwoPointHalfMissExample) {
  // Errors {1150, 0} with v_max = 1150: sqrt((1150^2 + 0)/2)/1150 = 1/sqrt(2).
  std::vector<double> preds = {1150.0, 40.0};
  std::vector<double> truths = {0.0, 40.0};
  EXPECT_DOUBLE_EQ(normalized_rmse(preds, truths, 1150.0), std::sqrt(0.5));
}

TEST(Nrmse, RejectsBadInput) {
  std::vector<double> a = {1.0}, b = {1.0, 2.0}, empty;
  EXPECT_THROW(normalized_rmse(empty, empty, 1.0), std::invalid_argument);
  EXPECT_THROW(normalized_rmse(a, b, 1.0), std::invalid_argument);
  EXPECT_THROW(normalized_rmse(a, a, 0.0), std::invalid_argument);
  EXPECT_THROW(normalized_rmse(a, a, -2.0), std::invalid_argument);
}

TEST(ErrorAccum, ThrowsWithoutSamples) {
  ErrorAccum acc;
  EXPECT_THROW(acc.rmse(), std::invalid_argument);
  acc.add(2.0, -1.0);
  EXPECT_DOUBLE_EQ(acc.rmse(), 3.0);
}

TEST(MeanSe, MatchesHandComputation) {
  auto r = mean_and_se({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  // Sample variance 5/3, standard error sqrt(5/12).
  EXPECT_DOUBLE_EQ(r.se, std::sqrt(5.0 / 12.0));

  auto single = mean_and_se({7.0});
  EXPECT_DOUBLE_EQ(single.mean, 7.0);
  EXPECT_EQ(single.se, 0.0);

  EXPECT_THROW(mean_and_se({}), std::invalid_argument);
}
