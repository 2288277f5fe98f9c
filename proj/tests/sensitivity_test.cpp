#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include <unistd.h>

#include "modex/sensitivity.hpp"
#include "oracles.hpp"

namespace modex::sensitivity {
namespace {

using testing::random_tensor;
using T = Tensor<double>;

JacobianBlock block_of(std::size_t rows, std::size_t cols, std::vector<double> values) {
  JacobianBlock j(rows, cols);
  j.values = std::move(values);
  return j;
}

ModelConfig config(Variant variant, std::size_t L, std::size_t D, std::size_t blocks) {
  ModelConfig cfg;
  cfg.lookback = L;
  cfg.horizon = 3;
  cfg.hidden_dim = D;
  cfg.variant = variant;
  cfg.num_blocks = blocks;
  cfg.seed = 11;
  return cfg;
}

void randomize(Model& model, std::mt19937_64& rng, double scale = 0.6) {
  for (auto& e : model.params()) e.value = random_tensor(e.value.shape(), rng, -scale, scale);
}

// Test-side Jacobian: central differences of each feature coordinate.
JacobianBlock oracle_jacobian(const Model& model, T x, std::size_t variate, std::size_t layer) {
  const std::size_t L = model.config().lookback, D = model.config().hidden_dim;
  JacobianBlock j(D, L);
  std::span<double> row(&x.at(variate, 0), L);
  for (std::size_t i = 0; i < D; ++i) {
    const auto g = testing::central_gradient([&] { return model.feature_probe(x, layer).at(variate, i); }, row, 1e-4);
    for (std::size_t t = 0; t < L; ++t) j.at(i, t) = g[t];
  }
  return j;
}

TEST(Aggregate, MixedSignContrast) {
  const auto j = block_of(2, 2, {1, -1, -1, 1});
  EXPECT_EQ(aggregate(j, Mode::abs_rowmean), (std::vector<double>{1, 1}));
  EXPECT_EQ(aggregate(j, Mode::positive_rowmean), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(aggregate(j, Mode::signed_rowmean), (std::vector<double>{0, 0}));
  EXPECT_EQ(aggregate(j, Mode::center_row), (std::vector<double>{1, 1}));
}

TEST(Aggregate, NonnegativeJacobianAbsEqualsPositive) {
  std::mt19937_64 rng(1);
  const auto t = random_tensor({5, 7}, rng, 0, 2);
  const auto j = block_of(5, 7, {t.data().begin(), t.data().end()});
  EXPECT_EQ(aggregate(j, Mode::abs_rowmean), aggregate(j, Mode::positive_rowmean));
}

TEST(Aggregate, SingleRowVariantsCoincide) {
  const auto j = block_of(1, 3, {-2, 0.5, 3});
  const auto abs = aggregate(j, Mode::abs_rowmean);
  EXPECT_EQ(abs, (std::vector<double>{2, 0.5, 3}));
  EXPECT_EQ(aggregate(j, Mode::center_row), abs);
  EXPECT_EQ(aggregate(block_of(1, 3, {2, 0.5, 3}), Mode::positive_rowmean), (std::vector<double>{2, 0.5, 3}));
}

TEST(Aggregate, ModeNames) {
  for (Mode m : {Mode::abs_rowmean, Mode::positive_rowmean, Mode::center_row, Mode::signed_rowmean})
    EXPECT_EQ(parse_mode(to_string(m)), m);
  EXPECT_THROW(parse_mode("gradcam"), ConfigError);
}

TEST(Jacobian, ShapeIsFeaturesByTime) {
  const Model model(config(Variant::modex, 9, 5, 2));
  std::mt19937_64 rng(2);
  const auto j = jacobian(model, random_tensor({3, 9}, rng), 1, 2);
  EXPECT_EQ(j.rows, 5u);
  EXPECT_EQ(j.cols, 9u);
  EXPECT_EQ(layer_sensitivity(model, random_tensor({3, 9}, rng), 0, 1).values.size(), 9u);
}

TEST(Jacobian, LinearEmbeddingThroughRevinClosedForm) {
  ModelConfig cfg = config(Variant::modex, 6, 4, 0);
  cfg.activation = Activation::identity;
  Model model(cfg);
  std::mt19937_64 rng(3);
  randomize(model, rng);
  const T x = random_tensor({1, 6}, rng, -2, 2);
  const std::size_t L = 6;
  double mu = 0, var = 0;
  for (std::size_t t = 0; t < L; ++t) mu += x[t] / L;
  for (std::size_t t = 0; t < L; ++t) var += (x[t] - mu) * (x[t] - mu) / L;
  const double sd = std::sqrt(var);
  // d n_k / d x_j = (delta_kj - 1/L) / sd - (x_k - mu)(x_j - mu) / (L sd^3)
  const auto& we = model.params().get("embed.weight");
  const auto j = jacobian(model, x, 0, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < L; ++c) {
      double expected = 0;
      for (std::size_t k = 0; k < L; ++k) {
        const double dn = ((k == c ? 1.0 : 0.0) - 1.0 / L) / sd - (x[k] - mu) * (x[c] - mu) / (L * sd * sd * sd);
        expected += we.at(k, i) * dn;
      }
      EXPECT_NEAR(j.at(i, c), expected, 1e-12);
    }
  }
  // Frozen statistics reduce the normalization Jacobian to I / sd.
  const auto frozen = jacobian(model, x, 0, 0, RevinGrad::frozen_stats);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < L; ++c) EXPECT_NEAR(frozen.at(i, c), we.at(c, i) / sd, 1e-12);
}

TEST(Jacobian, MatchesFiniteDifferencesAcrossVariants) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> pick_l(2, 32), pick_d(1, 16);
  for (Variant v : {Variant::modex, Variant::dense, Variant::plain_stack}) {
    for (int rep = 0; rep < 3; ++rep) {
      Model model(config(v, pick_l(rng), pick_d(rng), 2));
      randomize(model, rng);
      const T x = random_tensor({2, model.config().lookback}, rng, -2, 2);
      for (std::size_t layer = 0; layer <= 2; ++layer) {
        const auto exact = jacobian(model, x, 1, layer);
        const auto fd = oracle_jacobian(model, x, 1, layer);
        for (std::size_t k = 0; k < exact.values.size(); ++k)
          ASSERT_NEAR(exact.values[k], fd.values[k], 1e-6 * (1 + std::abs(fd.values[k])))
              << to_string(v) << " layer " << layer;
        const auto s_exact = aggregate(exact, Mode::abs_rowmean), s_fd = aggregate(fd, Mode::abs_rowmean);
        for (std::size_t t = 0; t < s_exact.size(); ++t) EXPECT_NEAR(s_exact[t], s_fd[t], 1e-6);
      }
    }
  }
}

TEST(Jacobian, LibraryFiniteDifferenceAgrees) {
  std::mt19937_64 rng(5);
  Model model(config(Variant::modex, 16, 8, 1));
  randomize(model, rng);
  const T x = random_tensor({1, 16}, rng, -3, 3);
  const auto exact = jacobian(model, x, 0, 1);
  const auto fd = finite_difference_jacobian(model, x, 0, 1);
  for (std::size_t k = 0; k < exact.values.size(); ++k)
    EXPECT_NEAR(exact.values[k], fd.values[k], 1e-6 * (1 + std::abs(exact.values[k])));
}

TEST(Jacobian, SingleFeatureIsGradientRow) {
  std::mt19937_64 rng(6);
  Model model(config(Variant::modex, 7, 1, 1));
  randomize(model, rng);
  const T x = random_tensor({1, 1, 7}, rng);
  Tape<double> tape(false);
  const auto in = tape.input(x, true);
  ForwardOptions opts;
  opts.stop_after_layer = 1;
  tape.backward(ops::sum(model.forward(in, opts).features[1]));
  const auto j = jacobian(model, x, 0, 1);
  ASSERT_EQ(j.rows, 1u);
  for (std::size_t t = 0; t < 7; ++t) EXPECT_EQ(j.at(0, t), tape.grad(in)[t]);
  const auto abs = aggregate(j, Mode::abs_rowmean);
  EXPECT_EQ(aggregate(j, Mode::center_row), abs);
}

TEST(Jacobian, CrossVariateBlocksAreZero) {
  std::mt19937_64 rng(7);
  ModelConfig cfg = config(Variant::modex, 8, 4, 2);
  cfg.revin_affine = true;
  cfg.num_variates = 3;
  Model model(cfg);
  randomize(model, rng);
  const T x = random_tensor({3, 8}, rng);
  const auto full = window_jacobian(model, x, 2);
  ASSERT_EQ(full.rows, 12u);
  ASSERT_EQ(full.cols, 24u);
  for (std::size_t r = 0; r < full.rows; ++r) {
    for (std::size_t c = 0; c < full.cols; ++c) {
      const std::size_t out_variate = r / 4, in_variate = c / 8;
      if (out_variate != in_variate) {
        EXPECT_EQ(full.at(r, c), 0.0);
      }
    }
  }
  for (std::size_t n = 0; n < 3; ++n) {
    const auto block = jacobian(model, x, n, 2);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t t = 0; t < 8; ++t) EXPECT_EQ(block.at(i, t), full.at(n * 4 + i, n * 8 + t));
  }
}

TEST(Sensitivity, LinearModelIsInputIndependent) {
  for (Variant v : {Variant::modex, Variant::plain_stack}) {
    ModelConfig cfg = config(v, 12, 6, 3);
    cfg.revin = false;
    cfg.activation = Activation::identity;
    Model model(cfg);
    std::mt19937_64 rng(8);
    randomize(model, rng);
    // Constant gates keep the mixture linear.
    if (v == Variant::modex)
      for (auto& e : model.params())
        if (e.name.find("router") != std::string::npos) e.value.fill(0);
    for (std::size_t layer = 0; layer <= 3; ++layer) {
      const auto a = layer_sensitivity(model, random_tensor({1, 12}, rng, -5, 5), 0, layer).values;
      const auto b = layer_sensitivity(model, random_tensor({1, 12}, rng, -5, 5), 0, layer).values;
      for (std::size_t t = 0; t < 12; ++t) EXPECT_NEAR(a[t], b[t], 1e-10);
    }
  }
}

TEST(Sensitivity, PairwiseCancellingRows) {
  ModelConfig cfg = config(Variant::modex, 2, 2, 0);
  cfg.revin = false;
  Model model(cfg);
  model.params().get("embed.weight") = T({2, 2}, {1, -1, -1, 1});
  const T x({1, 2}, {0.3, -0.7});
  const auto abs = layer_sensitivity(model, x, 0, 0, Mode::abs_rowmean).values;
  const auto sgn = layer_sensitivity(model, x, 0, 0, Mode::signed_rowmean).values;
  EXPECT_EQ(abs, (std::vector<double>{1, 1}));
  EXPECT_EQ(sgn, (std::vector<double>{0, 0}));
  EXPECT_EQ(attribution_variants(model, x, 0, 0, Mode::positive_rowmean).values, (std::vector<double>{0.5, 0.5}));
}

TEST(Sensitivity, NonnegativeForRandomModels) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    Model model(config(Variant::modex, 10, 5, 2));
    randomize(model, rng);
    const T x = random_tensor({2, 10}, rng);
    for (Mode m : {Mode::abs_rowmean, Mode::positive_rowmean, Mode::center_row})
      for (double v : mean_sensitivity(model, x, 2, m).values) EXPECT_GE(v, 0.0);
  }
}

TEST(Sensitivity, ZeroedModelHasZeroMaps) {
  Model model(config(Variant::plain_stack, 5, 3, 3));
  for (auto& e : model.params()) e.value.fill(0);
  std::mt19937_64 rng(10);
  for (std::size_t layer = 0; layer <= 3; ++layer)
    for (double v : layer_sensitivity(model, random_tensor({1, 5}, rng), 0, layer).values) EXPECT_EQ(v, 0.0);
}

TEST(Sensitivity, Errors) {
  Model model(config(Variant::modex, 5, 3, 1));
  const T x({1, 5}, 1.0);
  EXPECT_THROW(jacobian(model, x, 0, 2), UsageError);
  EXPECT_THROW(jacobian(model, x, 1, 0), UsageError);
  EXPECT_THROW(jacobian(model, T({1, 4}, 1.0), 0, 0), DimensionError);
  model.params().get("head.bias")[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(jacobian(model, x, 0, 0), NumericalError);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

class SweepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = (std::filesystem::temp_directory_path() / ("modex_sweep_" + std::to_string(::getpid()))).string();
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::string dir_;
};

TEST_F(SweepTest, FileContract) {
  Model model(config(Variant::plain_stack, 4, 3, 3));
  std::mt19937_64 rng(12);
  randomize(model, rng);
  std::vector<SweepSample> samples{{0, random_tensor({1, 4}, rng), std::nullopt},
                                   {1, random_tensor({1, 4}, rng), 0}};
  const auto result = sensitivity_sweep(model, samples, {3, 1, 2}, dir_);
  EXPECT_EQ(result.files.size(), 7u);
  EXPECT_EQ(result.layers, (std::vector<std::size_t>{1, 2, 3}));
  const auto heat = read_lines(dir_ + "/" + heatmap_name(1, 2));
  ASSERT_EQ(heat.size(), 5u);
  EXPECT_EQ(heat[0], "t,input,value");
  EXPECT_EQ(heat[4].substr(0, 2), "3,");
  const auto manifest = read_lines(dir_ + "/manifest.csv");
  ASSERT_EQ(manifest.size(), 3u);
  EXPECT_EQ(manifest[0], "sample,argmax_layer,mean_l1,mean_l2,mean_l3,tied");
}

TEST_F(SweepTest, ZeroedModelTiesResolveToLowestLayer) {
  Model model(config(Variant::plain_stack, 4, 3, 3));
  for (auto& e : model.params()) e.value.fill(0);
  const auto result = sensitivity_sweep(model, {{5, T({1, 4}, {1, 2, 3, 5}), 0}}, {2, 3}, dir_);
  ASSERT_EQ(result.rows.size(), 1u);
  EXPECT_EQ(result.rows[0].argmax_layer, 2u);
  EXPECT_TRUE(result.rows[0].tied);
  for (const auto& line : read_lines(dir_ + "/" + heatmap_name(5, 3)))
    if (line != "t,input,value") {
      EXPECT_EQ(line.substr(line.rfind(',') + 1), "0");
    }
}

TEST(Curation, ScoresSeparatePeriodicFromTrend) {
  std::vector<double> sine(96), ramp(96);
  for (std::size_t t = 0; t < 96; ++t) {
    sine[t] = std::sin(2 * std::numbers::pi * t / 24.0);
    ramp[t] = 0.1 * t;
  }
  EXPECT_GT(periodicity_score(sine), 0.7);
  EXPECT_LT(trend_score(sine), 0.1);
  EXPECT_NEAR(trend_score(ramp), 1.0, 1e-12);
  EXPECT_EQ(periodicity_score(ramp), 0.0);
}

TEST(Curation, PicksRequestedNumberOfDisjointWindows) {
  const auto series = data::synthetic_series({.num_variates = 2, .length = 2000});
  const data::WindowSet set(&series, 48, 24, 0, 2000, false);
  const auto picked = curate_windows(set, 8, 1);
  ASSERT_EQ(picked.size(), 8u);
  for (std::size_t a = 0; a < picked.size(); ++a)
    for (std::size_t b = a + 1; b < picked.size(); ++b)
      EXPECT_GE(picked[a] > picked[b] ? picked[a] - picked[b] : picked[b] - picked[a], 48u);
  EXPECT_EQ(curate_windows(set, 8, 1), picked);
}

TEST(PickLayer, StrictMaximumWins) {
  const auto row = pick_layer(0, {1, 2, 3}, {0.1, 0.5, 0.2});
  EXPECT_EQ(row.argmax_layer, 2u);
  EXPECT_FALSE(row.tied);
}

}  // namespace
}  // namespace modex::sensitivity
