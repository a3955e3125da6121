#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mtabl/metrics.hpp"
#include "oracles.hpp"

using mtabl::Matrix;

TEST(CrossEntropy, KnownValues) {
  EXPECT_EQ(mtabl::cross_entropy(Matrix{{0}, {1}, {0}}, 1).loss, 0.0);
  const auto ce = mtabl::cross_entropy(Matrix{{1.0 / 3}, {1.0 / 3}, {1.0 / 3}}, 2);
  EXPECT_NEAR(ce.loss, std::log(3.0), 1e-15);
  EXPECT_NEAR(ce.loss, 1.0986, 1e-4);
  EXPECT_FALSE(ce.clamped);
}

TEST(CrossEntropy, WeightScalesLossAndGradient) {
  const Matrix p{{0.2}, {0.5}, {0.3}};
  const auto ce = mtabl::cross_entropy(p, 0, {2.0, 1.0, 1.0});
  EXPECT_NEAR(ce.loss, -2.0 * std::log(0.2), 1e-15);
  EXPECT_NEAR(ce.grad_scores(0, 0), 2.0 * (0.2 - 1.0), 1e-15);
  EXPECT_NEAR(ce.grad_scores(1, 0), 2.0 * 0.5, 1e-15);
}

TEST(CrossEntropy, FusedGradientMatchesFiniteDifferencesThroughSoftmax) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3, 3);
  const mtabl::ClassWeights w{0.7, 1.1, 1.2};
  auto probs = [](const Matrix& z) { return mtabl::transpose(mtabl::softmax_rows(mtabl::transpose(z))); };
  for (int trial = 0; trial < 50; ++trial) {
    Matrix z{{u(rng)}, {u(rng)}, {u(rng)}};
    const std::size_t label = static_cast<std::size_t>(trial % 3);
    const auto ce = mtabl::cross_entropy(probs(z), label, w);
    for (std::size_t i = 0; i < 3; ++i) {
      const double h = 1e-5;
      Matrix zp = z, zm = z;
      zp(i, 0) += h;
      zm(i, 0) -= h;
      const double num = (mtabl::cross_entropy(probs(zp), label, w).loss -
                          mtabl::cross_entropy(probs(zm), label, w).loss) /
                         (2 * h);
      const double a = ce.grad_scores(i, 0);
      EXPECT_LE(std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8}), 1e-6);
    }
  }
}

TEST(CrossEntropy, ClampsVanishingProbability) {
  const auto ce = mtabl::cross_entropy(Matrix{{1.0}, {0.0}, {0.0}}, 2);
  EXPECT_TRUE(ce.clamped);
  EXPECT_TRUE(std::isfinite(ce.loss));
  EXPECT_NEAR(ce.loss, -std::log(1e-300), 1e-9);
}

TEST(CrossEntropy, NonNegative) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    double a = u(rng), b = u(rng), c = u(rng);
    const double s = a + b + c;
    EXPECT_GE(mtabl::cross_entropy(Matrix{{a / s}, {b / s}, {c / s}}, trial % 3).loss, 0.0);
  }
}

TEST(CrossEntropy, Errors) {
  EXPECT_THROW((void)mtabl::cross_entropy(Matrix(2, 1, 0.5), 0), mtabl::DimensionError);
  EXPECT_THROW((void)mtabl::cross_entropy(Matrix(3, 1, 1.0 / 3), 3), mtabl::DataError);
}

TEST(ClassWeights, InverseFrequencyHasMeanOne) {
  const std::vector<std::size_t> labels{0, 1, 1, 1, 1, 1, 2, 2};
  const auto w = mtabl::inverse_frequency_weights(labels);
  EXPECT_NEAR((w[0] + w[1] + w[2]) / 3.0, 1.0, 1e-15);
  EXPECT_NEAR(w[0] / w[1], 5.0, 1e-12);
  EXPECT_NEAR(w[2] / w[1], 2.5, 1e-12);
  const std::vector<std::size_t> balanced{0, 1, 2, 2, 1, 0};
  for (double v : mtabl::inverse_frequency_weights(balanced)) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Evaluate, PerfectPredictions) {
  const std::vector<std::size_t> y{0, 1, 2, 1, 1};
  const auto r = mtabl::evaluate(y, y);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.macro_precision, 1.0);
  EXPECT_EQ(r.macro_recall, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
}

TEST(Evaluate, HandComputedExample) {
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2}, preds{0, 1, 1, 1, 2, 0};
  const auto r = mtabl::evaluate(preds, labels);
  const decltype(r.confusion.counts) expected{{{1, 1, 0}, {0, 2, 0}, {1, 0, 1}}};
  EXPECT_EQ(r.confusion.counts, expected);
  EXPECT_NEAR(r.accuracy, 4.0 / 6.0, 1e-15);
  EXPECT_NEAR(r.precision[0], 0.5, 1e-15);
  EXPECT_NEAR(r.precision[1], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.precision[2], 1.0, 1e-15);
  EXPECT_NEAR(r.recall[0], 0.5, 1e-15);
  EXPECT_NEAR(r.recall[1], 1.0, 1e-15);
  EXPECT_NEAR(r.recall[2], 0.5, 1e-15);
  EXPECT_NEAR(r.macro_f1, (0.5 + 0.8 + 2.0 / 3.0) / 3.0, 1e-15);
  EXPECT_NEAR(r.macro_f1, 0.6556, 1e-4);
}

TEST(Evaluate, DegeneratePredictorScoresZeroNotNaN) {
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2}, preds(6, 1);
  const auto r = mtabl::evaluate(preds, labels);
  EXPECT_EQ(r.recall[1], 1.0);
  EXPECT_EQ(r.f1[0], 0.0);
  EXPECT_EQ(r.f1[2], 0.0);
  EXPECT_EQ(r.precision[0], 0.0);
  EXPECT_FALSE(std::isnan(r.macro_f1));
}

TEST(Evaluate, Errors) {
  const std::vector<std::size_t> empty, one{1}, two{1, 2}, bad{3};
  EXPECT_THROW((void)mtabl::evaluate(empty, empty), mtabl::DataError);
  EXPECT_THROW((void)mtabl::evaluate(one, two), mtabl::DataError);
  EXPECT_THROW((void)mtabl::evaluate(bad, one), mtabl::DataError);
}

TEST(Evaluate, MatchesBruteForceAndIsPermutationInvariant) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> cls(0, 2), len(1, 300);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = len(rng);
    std::vector<std::size_t> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = cls(rng);
      y[i] = cls(rng);
    }
    const auto r = mtabl::evaluate(p, y);
    const auto o = oracle::brute_force_metrics(p, y);
    EXPECT_NEAR(r.accuracy, o.accuracy, 1e-12);
    EXPECT_NEAR(r.macro_precision, o.macro_precision, 1e-12);
    EXPECT_NEAR(r.macro_recall, o.macro_recall, 1e-12);
    EXPECT_NEAR(r.macro_f1, o.macro_f1, 1e-12);
    EXPECT_EQ(r.accuracy, static_cast<double>(r.confusion.trace()) / static_cast<double>(n));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> ps(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      ps[i] = p[order[i]];
      ys[i] = y[order[i]];
    }
    EXPECT_EQ(mtabl::evaluate(ps, ys), r);
  }
}

TEST(Evaluate, ShardedConfusionMergesByAddition) {
  const std::vector<std::size_t> p{0, 1, 2, 2, 1, 0, 0}, y{0, 2, 2, 1, 1, 0, 1};
  mtabl::ConfusionMatrix a, b;
  for (std::size_t i = 0; i < 3; ++i) a.add(y[i], p[i]);
  for (std::size_t i = 3; i < p.size(); ++i) b.add(y[i], p[i]);
  a.merge(b);
  EXPECT_EQ(mtabl::report_from_confusion(a), mtabl::evaluate(p, y));
}

TEST(EvalReportSerialization, KeyValueAndJson) {
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2}, preds{0, 1, 1, 1, 2, 0};
  const auto r = mtabl::evaluate(preds, labels);
  const std::string kv = mtabl::to_kv_text(r);
  EXPECT_NE(kv.find("n_samples=6\n"), std::string::npos);
  EXPECT_NE(kv.find("confusion_2=1,0,1\n"), std::string::npos);
  EXPECT_NE(kv.find("macro_f1=0.6555555555555"), std::string::npos);
  EXPECT_EQ(mtabl::eval_report_from_json(mtabl::to_json(r)), r);
}
