#include <gtest/gtest.h>

#include <random>

#include "mtabl/verify.hpp"

using mtabl::Activation;
using mtabl::LayerKind;
using mtabl::LayerSpec;
using mtabl::Matrix;
using mtabl::NetworkSpec;
using mtabl::OpTag;

TEST(RelativeError, Floor) {
  EXPECT_EQ(mtabl::relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(mtabl::relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(mtabl::relative_error(0.0, 1e-10), 1e-2);
}

TEST(Gradcheck, QuadraticBilinearIsNearExact) {
  // Identity BL with squared error: the loss is quadratic in each scalar, so
  // the central difference is exact up to rounding.
  std::mt19937_64 rng(1);
  const NetworkSpec spec(3, 4, {LayerSpec{LayerKind::bl, 2, 3, 1, Activation::identity}});
  const auto p = mtabl::random_params(spec, rng);
  const Matrix x = mtabl::random_matrix(3, 4, rng);
  const auto obj = mtabl::Objective::squared_error_to(mtabl::random_matrix(2, 3, rng));
  const auto rep = mtabl::gradcheck(spec, p, x, obj);
  EXPECT_TRUE(rep.passed);
  EXPECT_LE(rep.max_relative_error, 1e-8);
  ASSERT_EQ(rep.blocks.size(), 4u);
  EXPECT_EQ(rep.blocks[0].name, "L0.W1");
  EXPECT_EQ(rep.blocks[3].name, "input");
  EXPECT_EQ(rep.blocks[0].tested, 6u);
}

TEST(Gradcheck, MultiHeadLayersPassForAllHeadCounts) {
  for (std::size_t k = 2; k <= 5; ++k) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto c = mtabl::random_layer_case(LayerKind::mtabl, k, 1000 * k + seed);
      const auto rep = mtabl::gradcheck(c.spec, c.params, c.x, c.objective);
      EXPECT_TRUE(rep.passed) << "K=" << k << " seed " << seed << " err " << rep.max_relative_error;
    }
  }
}

TEST(Gradcheck, TamperedGradientIsLocated) {
  const auto c = mtabl::random_layer_case(LayerKind::mtabl, 3, 77);
  mtabl::GradCheckOptions opt;
  const std::size_t col = c.spec.layers()[0].out_cols - 1;
  opt.tamper = [&](mtabl::NetworkGradients& g) {
    auto& m = std::get<mtabl::MTABLParams>(g.params[0]);
    m.base.W2(m.base.W2.rows() - 1, col) *= 2.0;
  };
  const auto clean = mtabl::gradcheck(c.spec, c.params, c.x, c.objective);
  ASSERT_TRUE(clean.passed);
  const auto fwd = mtabl::network_forward(c.spec, c.params, c.x);
  const auto lg = mtabl::loss_and_gradient(c.objective, fwd.output);
  const auto g = mtabl::network_backward(c.spec, c.params, fwd.caches, lg.grad, lg.at);
  const auto& w2 = std::get<mtabl::MTABLParams>(g.params[0]).base.W2;
  if (std::abs(w2(w2.rows() - 1, col)) < 1e-6) GTEST_SKIP() << "chosen entry has a zero gradient";

  const auto rep = mtabl::gradcheck(c.spec, c.params, c.x, c.objective, opt);
  EXPECT_FALSE(rep.passed);
  for (const auto& b : rep.blocks) {
    if (b.name == "L0.W2") {
      EXPECT_NEAR(b.max_relative_error, 0.5, 1e-4);
      EXPECT_EQ(b.argmax_row, w2.rows() - 1);
      EXPECT_EQ(b.argmax_col, col);
    } else {
      EXPECT_LE(b.max_relative_error, 1e-4) << b.name;
    }
  }
}

TEST(Gradcheck, LambdaAtBoundaryUsesOneSidedDifference) {
  const NetworkSpec spec(3, 3, {LayerSpec{LayerKind::tabl, 2, 2, 1, Activation::identity}});
  std::mt19937_64 rng(3);
  for (double lam : {0.0, 1.0}) {
    auto p = mtabl::random_params(spec, rng);
    std::get<mtabl::TABLParams>(p[0]).lambda = lam;
    const auto rep = mtabl::gradcheck(spec, p, mtabl::random_matrix(3, 3, rng),
                                      mtabl::Objective::squared_error_to(Matrix(2, 2, 0.3)));
    EXPECT_TRUE(rep.passed) << "lambda " << lam;
    const auto& lb = rep.blocks[rep.blocks.size() - 2];
    EXPECT_EQ(lb.name, "L0.lambda");
    EXPECT_EQ(lb.one_sided, 1u);
  }
}

TEST(Reduction, SingleHeadIdentityMatchesTabl) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto rep = mtabl::check_reduction(seed, mtabl::ReductionCase::single_head_identity);
    EXPECT_TRUE(rep.passed) << rep.max_output_diff << " " << rep.max_gradient_diff;
    EXPECT_EQ(rep.inputs, 100u);
  }
}

TEST(Reduction, IdenticalHeadsWithMeanMatchesTabl) {
  for (std::uint64_t seed : {4, 5, 6}) {
    const auto rep = mtabl::check_reduction(seed, mtabl::ReductionCase::identical_heads_mean);
    EXPECT_TRUE(rep.passed) << rep.max_output_diff << " " << rep.max_gradient_diff;
  }
}

TEST(Reduction, PerturbedControlIsDetected) {
  const auto rep = mtabl::check_reduction(7, mtabl::ReductionCase::perturbed_control);
  EXPECT_TRUE(rep.passed);
  EXPECT_FALSE(rep.coincide);
  EXPECT_GT(rep.max_output_diff, 1e-6);
}

TEST(Complexity, WorkedExample) {
  const auto e = mtabl::complexity_estimate(40, 10, 3, 1, 2);
  const std::array<std::uint64_t, 6> expected{1200, 30, 6, 600, 90, 180};
  EXPECT_EQ(e.terms, expected);
  EXPECT_EQ(e.total, 2106u);
  EXPECT_THROW((void)mtabl::complexity_estimate(40, 10, 3, 1, 0), mtabl::ConfigError);
}

TEST(Complexity, SingleHeadAddsOnlyRecombination) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::uint64_t> dim(1, 50);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = dim(rng), t = dim(rng), dout = dim(rng), tout = dim(rng);
    EXPECT_EQ(mtabl::complexity_estimate(d, t, dout, tout, 1).total,
              mtabl::tabl_complexity(d, t, dout, tout) + dout * dout * t);
    std::uint64_t prev = 0;
    for (std::uint64_t k = 1; k <= 8; ++k) {
      const auto total = mtabl::complexity_estimate(d, t, dout, tout, k).total;
      EXPECT_GT(total, prev);
      prev = total;
    }
  }
}

TEST(Complexity, MeasuredCountsMatchModelTerms) {
  struct Dims {
    std::size_t d, t, dout, tout, k;
  };
  for (const Dims& s : {Dims{40, 10, 3, 1, 2}, Dims{7, 5, 4, 3, 1}, Dims{6, 8, 5, 2, 4}}) {
    const auto c = mtabl::measure_forward_multiplications(LayerKind::mtabl, s.d, s.t, s.dout, s.tout, s.k);
    const auto e = mtabl::complexity_estimate(s.d, s.t, s.dout, s.tout, s.k);
    EXPECT_EQ(c[OpTag::projection], e.terms[0]);
    EXPECT_EQ(c[OpTag::output_projection], e.terms[1]);
    EXPECT_EQ(c[OpTag::attention_scores], e.terms[3]);
    EXPECT_EQ(c[OpTag::attention_scores], s.k * s.dout * s.t * s.t);
    EXPECT_EQ(c[OpTag::recombination], e.terms[5]);
    EXPECT_EQ(c[OpTag::recombination], s.dout * s.dout * s.k * s.t);
    // Xbar + lambda (Xbar . A - Xbar): two products per entry, once per head.
    EXPECT_EQ(c[OpTag::attention_mix], 2 * s.k * s.dout * s.t);
    EXPECT_EQ(c[OpTag::other], 0u);
  }
  const auto t = mtabl::measure_forward_multiplications(LayerKind::tabl, 40, 10, 3, 1, 1);
  EXPECT_EQ(t[OpTag::recombination], 0u);
  EXPECT_EQ(t[OpTag::attention_scores], 300u);
}
