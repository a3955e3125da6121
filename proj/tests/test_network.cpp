#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "mtabl/checkpoint.hpp"
#include "mtabl/network.hpp"
#include "mtabl/verify.hpp"

using mtabl::Activation;
using mtabl::LayerKind;
using mtabl::LayerSpec;
using mtabl::Matrix;
using mtabl::NetworkSpec;

TEST(NetworkSpec, TopologyPresetsChainToThreeClasses) {
  for (auto t : {mtabl::Topology::A, mtabl::Topology::B, mtabl::Topology::C}) {
    for (auto kind : {LayerKind::tabl, LayerKind::mtabl}) {
      const NetworkSpec s = mtabl::make_topology(t, kind, 3);
      EXPECT_TRUE(s.is_classifier());
      EXPECT_EQ(s.input_rows(), 40u);
      EXPECT_EQ(s.input_cols(), 10u);
      EXPECT_EQ(s.layers().back().kind, kind);
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        EXPECT_EQ(s.layers()[i].kind, LayerKind::bl);
        EXPECT_EQ(s.layers()[i].activation, Activation::relu);
      }
    }
  }
  const NetworkSpec b = mtabl::make_topology(mtabl::Topology::B, LayerKind::mtabl, 2);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b.input_shape(1), (std::pair<std::size_t, std::size_t>{120, 5}));
  const NetworkSpec c = mtabl::make_topology(mtabl::Topology::C, LayerKind::tabl, 1);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.input_shape(1), (std::pair<std::size_t, std::size_t>{60, 10}));
  EXPECT_EQ(c.input_shape(2), (std::pair<std::size_t, std::size_t>{120, 5}));
}

TEST(NetworkSpec, InvalidConfigurationsFailAtConstruction) {
  EXPECT_THROW(NetworkSpec(40, 10, {}), mtabl::ConfigError);
  EXPECT_THROW(NetworkSpec(40, 10, {LayerSpec{LayerKind::mtabl, 3, 1, 0, Activation::softmax}}),
               mtabl::ConfigError);
  EXPECT_THROW(NetworkSpec(40, 10, {LayerSpec{LayerKind::mtabl, 3, 1, 9, Activation::softmax}}),
               mtabl::ConfigError);
  EXPECT_THROW(NetworkSpec(40, 10, {LayerSpec{LayerKind::tabl, 3, 2, 1, Activation::softmax}}),
               mtabl::ConfigError);
  EXPECT_THROW(mtabl::make_topology(mtabl::Topology::B, LayerKind::tabl, 1, 40, 10,
                                    mtabl::HiddenDims{}),
               mtabl::ConfigError);
  EXPECT_THROW(mtabl::make_topology(mtabl::Topology::A, LayerKind::bl, 1), mtabl::ConfigError);
}

TEST(NetworkInit, FollowsInitialisationScheme) {
  const NetworkSpec s = mtabl::make_topology(mtabl::Topology::B, LayerKind::mtabl, 3);
  const auto p = mtabl::init_params(s, 42);
  mtabl::check_params(s, p);
  const auto& bl = std::get<mtabl::BLParams>(p[0]);
  const double bound = 1.0 / std::sqrt(40.0);
  for (double v : bl.W1.data()) EXPECT_LE(std::abs(v), bound);
  for (double v : bl.B.data()) EXPECT_EQ(v, 0.0);
  const auto& m = std::get<mtabl::MTABLParams>(p[1]);
  EXPECT_EQ(m.lambda, 0.5);
  ASSERT_EQ(m.heads.size(), 3u);
  double mean = 0.0;
  for (double v : m.heads[0].data()) mean += v;
  mean /= static_cast<double>(m.heads[0].size());
  EXPECT_NEAR(mean, 1.0 / 5.0, 0.01);
  EXPECT_NE(m.heads[0], m.heads[1]);  // noise breaks head symmetry
  EXPECT_EQ(m.Wtilde1.rows(), 3u);
  EXPECT_EQ(m.Wtilde1.cols(), 9u);
  EXPECT_EQ(mtabl::init_params(s, 42), p);
}

TEST(NetworkInit, FrozenDiagonalStartsAtUniformAttention) {
  const NetworkSpec s =
      mtabl::make_topology(mtabl::Topology::A, LayerKind::mtabl, 2, 40, 10, std::nullopt, true);
  const auto p = mtabl::init_params(s, 1);
  for (const auto& w : std::get<mtabl::MTABLParams>(p[0]).heads)
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(w(i, i), 0.1);
}

TEST(NetworkForward, SingleLayerMatchesLayerForward) {
  std::mt19937_64 rng(2);
  const NetworkSpec s = mtabl::make_topology(mtabl::Topology::A, LayerKind::mtabl, 2, 6, 4);
  const auto p = mtabl::init_params(s, 3);
  const Matrix x = mtabl::random_matrix(6, 4, rng);
  const auto f = mtabl::network_forward(s, p, x);
  EXPECT_EQ(f.output, mtabl::layer_forward(x, p[0], Activation::softmax).output);
  EXPECT_EQ(f.output.rows(), 3u);
  EXPECT_EQ(f.output.cols(), 1u);
  EXPECT_THROW((void)mtabl::network_forward(s, p, Matrix(5, 4)), mtabl::DimensionError);
}

TEST(NetworkForward, CheckParamsRejectsMismatchedLayouts) {
  const NetworkSpec s = mtabl::make_topology(mtabl::Topology::A, LayerKind::mtabl, 2, 6, 4);
  auto p = mtabl::init_params(s, 3);
  std::get<mtabl::MTABLParams>(p[0]).heads.pop_back();
  EXPECT_THROW(mtabl::check_params(s, p), mtabl::ConfigError);
  const NetworkSpec other = mtabl::make_topology(mtabl::Topology::A, LayerKind::tabl, 1, 6, 4);
  EXPECT_THROW(mtabl::check_params(other, mtabl::init_params(s, 3)), mtabl::ConfigError);
}

TEST(NetworkBackward, EndToEndGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (auto t : {mtabl::Topology::A, mtabl::Topology::B, mtabl::Topology::C}) {
    for (std::size_t k : {1, 3}) {
      const auto kind = k == 1 ? LayerKind::tabl : LayerKind::mtabl;
      const mtabl::HiddenDims hidden = t == mtabl::Topology::A   ? mtabl::HiddenDims{}
                                       : t == mtabl::Topology::B ? mtabl::HiddenDims{{{4, 3}}}
                                                                 : mtabl::HiddenDims{{{5, 4}, {4, 3}}};
      const NetworkSpec s = mtabl::make_topology(t, kind, k, 5, 4, hidden);
      const auto p = mtabl::random_params(s, rng);
      Matrix x = mtabl::random_matrix(5, 4, rng);
      for (int tries = 0; tries < 100 && !mtabl::clear_of_relu_kinks(s, p, x, 1e-4); ++tries)
        x = mtabl::random_matrix(5, 4, rng);
      const auto obj = mtabl::Objective::cross_entropy_on(1, {0.5, 1.2, 1.3});
      const auto rep = mtabl::gradcheck(s, p, x, obj);
      EXPECT_TRUE(rep.passed) << "topology " << mtabl::to_string(t) << " K=" << k
                              << " max rel err " << rep.max_relative_error;
    }
  }
}

TEST(NetworkBackward, RejectsForeignCaches) {
  const NetworkSpec s = mtabl::make_topology(mtabl::Topology::B, LayerKind::tabl, 1, 5, 4,
                                             mtabl::HiddenDims{{{4, 3}}});
  const auto p = mtabl::init_params(s, 3);
  auto f = mtabl::network_forward(s, p, Matrix(5, 4, 0.5));
  f.caches.pop_back();
  EXPECT_THROW((void)mtabl::network_backward(s, p, f.caches, Matrix(3, 1)), mtabl::InternalError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const NetworkSpec s = mtabl::make_topology(mtabl::Topology::C, LayerKind::mtabl, 4, 40, 10);
  std::mt19937_64 rng(5);
  mtabl::Checkpoint ck{s, mtabl::random_params(s, rng), {}, {{"seed", 17}}};
  ck.normalization.mean = {1.5, -2.25};
  ck.normalization.stddev = {0.1, 3.0};
  std::stringstream buf;
  mtabl::save_checkpoint(buf, ck);
  const auto back = mtabl::load_checkpoint(buf);
  EXPECT_EQ(back.spec, ck.spec);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.normalization, ck.normalization);
  EXPECT_EQ(back.metadata, ck.metadata);
}

TEST(Checkpoint, CorruptInputsRaiseFormatErrors) {
  const NetworkSpec s = mtabl::make_topology(mtabl::Topology::A, LayerKind::tabl, 1, 4, 3);
  mtabl::Checkpoint ck{s, mtabl::init_params(s, 1), {}, {}};
  std::stringstream buf;
  mtabl::save_checkpoint(buf, ck);
  const std::string bytes = buf.str();

  std::stringstream bad_magic("NOTACKPT" + bytes.substr(8));
  EXPECT_THROW((void)mtabl::load_checkpoint(bad_magic), mtabl::FormatError);

  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  std::stringstream v(wrong_version);
  EXPECT_THROW((void)mtabl::load_checkpoint(v), mtabl::FormatError);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 20));
  EXPECT_THROW((void)mtabl::load_checkpoint(truncated), mtabl::FormatError);

  EXPECT_THROW((void)mtabl::load_checkpoint(std::string("/nonexistent/ckpt.bin")), mtabl::FormatError);
}

TEST(Checkpoint, SpecJsonRoundTrip) {
  const NetworkSpec s =
      mtabl::make_topology(mtabl::Topology::B, LayerKind::mtabl, 5, 40, 10, std::nullopt, true);
  EXPECT_EQ(mtabl::network_spec_from_json(mtabl::to_json(s)), s);
  EXPECT_THROW((void)mtabl::network_spec_from_json(nlohmann::json{{"layers", 3}}), mtabl::ConfigError);
}
