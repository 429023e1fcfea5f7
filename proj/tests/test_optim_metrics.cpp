#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "physiosync/metrics.hpp"
#include "physiosync/optim.hpp"

using namespace physiosync;
using namespace physiosync::optim;
using namespace physiosync::metrics;

namespace {

ad::ParamRefs<double> single(ad::Tensor<double>& t) {
  ad::ParamRefs<double> refs;
  refs.add("theta", t);
  return refs;
}

}  // namespace

TEST(Adam, FirstStepIsMinusLearningRate) {
  ad::Tensor<double> theta({1}, {0.0}, true);
  auto refs = single(theta);
  Adam<double> adam;
  theta.mutable_grad()[0] = 1.0;
  ASSERT_TRUE(adam.step(refs, 1e-3));
  EXPECT_NEAR(theta[0], -1e-3, 1e-10);
  theta.mutable_grad()[0] = 1.0;
  adam.step(refs, 1e-3);
  EXPECT_NEAR(theta[0], -2e-3, 1e-9);
}

TEST(Adam, ZeroGradientsLeaveParametersAndDecayMoments) {
  ad::Tensor<double> theta({2}, {0.5, -0.5}, true);
  auto refs = single(theta);
  Adam<double> adam;
  theta.mutable_grad() = {1.0, -2.0};
  adam.step(refs, 0.0);
  const auto m1 = adam.first_moments()[0], v1 = adam.second_moments()[0];
  theta.mutable_grad() = {0.0, 0.0};
  const auto before = theta.values();
  adam.step(refs, 0.0);
  EXPECT_EQ(theta.values(), before);
  EXPECT_DOUBLE_EQ(adam.first_moments()[0][1], 0.9 * m1[1]);
  EXPECT_DOUBLE_EQ(adam.second_moments()[0][1], 0.999 * v1[1]);
}

TEST(Adam, NonFiniteGradientSkipsTheStep) {
  ad::Tensor<double> theta({2}, {1.0, 2.0}, true);
  auto refs = single(theta);
  Adam<double> adam;
  theta.mutable_grad() = {std::numeric_limits<double>::quiet_NaN(), 1.0};
  EXPECT_FALSE(adam.step(refs, 1e-3));
  EXPECT_EQ(theta.values(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(adam.skipped(), 1u);
  EXPECT_EQ(adam.steps(), 0u);
}

TEST(Adam, SeededTrajectoriesAreBitIdentical) {
  auto run = [] {
    ad::Tensor<double> theta({3}, {0.1, 0.2, 0.3}, true);
    auto refs = single(theta);
    Adam<double> adam;
    for (int k = 0; k < 50; ++k) {
      for (std::size_t i = 0; i < 3; ++i) theta.mutable_grad()[i] = std::sin(theta[i] * (k + 1));
      adam.step(refs, 1e-2);
    }
    return theta.values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, WarmRestarts) {
  ScheduleConfig c{1e-4, 0.0, 30, 3};
  EXPECT_DOUBLE_EQ(lr_at(0, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(10, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(20, c), 1e-4);
  EXPECT_NEAR(lr_at(5, c), 0.5e-4, 1e-18);
  EXPECT_NEAR(lr_at(25, c), 0.5e-4, 1e-18);
  EXPECT_LT(lr_at(9, c), lr_at(8, c));
  ScheduleConfig full{1e-4, 0.0, 500, 3};
  EXPECT_DOUBLE_EQ(lr_at(167, full), 1e-4);  // cycles of 167, 167, 166
  EXPECT_DOUBLE_EQ(lr_at(334, full), 1e-4);
  EXPECT_THROW(lr_at(30, c), ConfigError);
}

TEST(Schedule, ShortRunsUseAConstantRate) {
  ScheduleConfig c{1e-3, 0.0, 8, 3};
  for (std::size_t e = 0; e < 8; ++e) EXPECT_DOUBLE_EQ(lr_at(e, c), 1e-3);
  ScheduleConfig ft{1e-3, 0.0, 15, 3};
  EXPECT_DOUBLE_EQ(lr_at(5, ft), 1e-3);
  EXPECT_LT(lr_at(4, ft), 1e-3);
}

TEST(Metrics, HandF1) {
  // TP=50, FP=10, FN=10, TN=30 with class 1 as positive.
  std::vector<std::size_t> truth, pred;
  auto add = [&](std::size_t t, std::size_t p, int n) {
    for (int i = 0; i < n; ++i) truth.push_back(t), pred.push_back(p);
  };
  add(1, 1, 50);
  add(0, 1, 10);
  add(1, 0, 10);
  add(0, 0, 30);
  auto m = compute_metrics(truth, pred, 2);
  EXPECT_NEAR(m.f1, 0.8333, 5e-5);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.8);
  EXPECT_EQ(m.confusion[1][0], 10u);
}

TEST(Metrics, PerfectAndConstantPredictors) {
  std::vector<std::size_t> truth{0, 1, 2, 3, 0, 1, 2, 3};
  auto perfect = compute_metrics(truth, truth, 4);
  EXPECT_DOUBLE_EQ(perfect.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(perfect.f1, 1.0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(perfect.confusion[c][c], 2u);

  std::vector<std::size_t> balanced{0, 1, 0, 1}, ones(4, 1);
  EXPECT_DOUBLE_EQ(compute_metrics(balanced, ones, 2).accuracy, 0.5);
  auto m = compute_metrics(truth, std::vector<std::size_t>(8, 0), 4);
  std::size_t row_total = 0;
  for (auto v : m.confusion[2]) row_total += v;
  EXPECT_EQ(row_total, 2u);
  EXPECT_THROW(compute_metrics({}, {}, 2), DatasetError);
}

TEST(Metrics, SummaryUsesPopulationStd) {
  auto s = summarize({0.5, 0.7, 0.9, 0.7});
  EXPECT_NEAR(s.mean, 0.7, 1e-12);
  EXPECT_NEAR(s.std, std::sqrt(0.02), 1e-12);
}
