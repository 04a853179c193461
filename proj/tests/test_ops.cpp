#include <gtest/gtest.h>

#include <random>

#include "crossray/diagnostics.hpp"

using namespace crossray;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    x = u(rng);
    // Keep away from the kinks of relu and |x|.
    if (std::abs(x) < 1e-2) x += x < 0 ? -2e-2 : 2e-2;
  }
  return T64(std::move(shape), std::move(v));
}

std::size_t rand_dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

TEST(Ops, ReluDefinition) {
  auto y = relu(T64({3}, {-1, 0, 2}));
  EXPECT_EQ(y[0], 0);
  EXPECT_EQ(y[1], 0);
  EXPECT_EQ(y[2], 2);
}

TEST(Ops, CovarianceOfConstantColumnsIsZero) {
  // Every column identical: each channel is constant over positions.
  T64 x({3, 5}, {1, 1, 1, 1, 1, -2, -2, -2, -2, -2, 0.5, 0.5, 0.5, 0.5, 0.5});
  auto c = spatial_covariance(x);
  ASSERT_EQ(c.shape(), (Shape{3, 3}));
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, Conv2dAllOnesMatchesSlidingWindow) {
  T64 x({1, 1, 5, 5}, 1.0);
  T64 w({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
  // Sliding-window oracle: count of in-bounds taps around each pixel.
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) {
      int count = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc)
          if (r + dr >= 0 && r + dr < 5 && c + dc >= 0 && c + dc < 5) ++count;
      EXPECT_EQ(y[static_cast<std::size_t>(r * 5 + c)], count);
    }
  EXPECT_EQ(y[12], 9);
  EXPECT_EQ(y[0], 4);
}

TEST(Ops, Conv2dMatchesDirectConvolution) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 6, 7}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto y = conv2d(x, w, b);
  for (std::size_t o = 0; o < 3; ++o)
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 7; ++c) {
        double acc = b[o];
        for (std::size_t i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sr = r + ky - 1, sc = c + kx - 1;
              if (sr < 0 || sr >= 6 || sc < 0 || sc >= 7) continue;
              acc += w[((o * 2 + i) * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)] *
                     x[(i * 6 + static_cast<std::size_t>(sr)) * 7 + static_cast<std::size_t>(sc)];
            }
        EXPECT_NEAR(y[(o * 6 + static_cast<std::size_t>(r)) * 7 + static_cast<std::size_t>(c)], acc, 1e-12);
      }
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  try {
    matmul(T64({2, 3}), T64({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("(2x3)"), std::string::npos);
  }
  EXPECT_THROW(add(T64({2, 3}), T64({4})), ShapeError);
  EXPECT_THROW(adaptive_avg_pool(T64({1, 4, 4}), 0, 2), ShapeError);
  EXPECT_THROW(bilinear_sample(T64({4, 4}), {}), ShapeError);
}

TEST(Ops, NonFiniteOutputIsAnError) {
  EXPECT_THROW(exp(T64({1}, {1000.0})), NonFiniteError);
  EXPECT_THROW(scalar_mul(T64({1}, {1e308}), 10.0), NonFiniteError);
}

TEST(Ops, BroadcastAddMatchesExplicitExpansion) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({4, 1, 3}, rng);
  auto b = random_tensor({5, 1}, rng);
  auto y = add(a, b);
  ASSERT_EQ(y.shape(), (Shape{4, 5, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(y[(i * 5 + j) * 3 + k], a[i * 3 + k] + b[j]);
}

TEST(Ops, AdaptivePoolUsesOverlappingBins) {
  // 5 -> 2 bins: [0,3) and [2,5).
  T64 x({1, 1, 5}, {1, 2, 3, 4, 5});
  auto y = adaptive_avg_pool(x, 1, 2);
  EXPECT_DOUBLE_EQ(y[0], 2.0);
  EXPECT_DOUBLE_EQ(y[1], 4.0);
}

TEST(Ops, BilinearSampleIdentityAndMidpoint) {
  T64 m({2, 2}, {0, 1, 0.25, 0.75});
  auto y = bilinear_sample(m, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {0, 0.5}, {5, 5}});
  EXPECT_EQ(y[0], 0);
  EXPECT_EQ(y[1], 1);
  EXPECT_EQ(y[2], 0.25);
  EXPECT_EQ(y[3], 0.75);
  EXPECT_DOUBLE_EQ(y[4], 0.5);
  EXPECT_EQ(y[5], 0.75);  // clamped
}

TEST(Ops, CovarianceIsSymmetricAndPsd) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = rand_dim(rng, 2, 12), n = rand_dim(rng, 2, 40);
    auto x = random_tensor({c, n}, rng, -3, 3);
    auto cov = spatial_covariance(x);
    double asym = 0, trace = 0;
    for (std::size_t i = 0; i < c; ++i) {
      trace += cov[i * c + i];
      for (std::size_t j = 0; j < c; ++j) asym = std::max(asym, std::abs(cov[i * c + j] - cov[j * c + i]));
    }
    EXPECT_LT(asym, 1e-12);
    // PSD: x^T S x >= -1e-9 trace for random directions (Rayleigh quotient bound).
    for (int k = 0; k < 20; ++k) {
      auto v = random_tensor({c, 1}, rng);
      auto q = matmul(transpose(v), matmul(cov, v));
      double vv = 0;
      for (double e : v.values()) vv += e * e;
      EXPECT_GT(q.item() / vv, -1e-9 * trace);
    }
  }
}

// Every op kind: analytic gradients of a random projection of the output
// agree with central differences on >= 20 random shapes/seeds.
class OpGradient : public ::testing::TestWithParam<OpKind> {};

TEST_P(OpGradient, AgreesWithFiniteDifferences) {
  const OpKind kind = GetParam();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto report = diagnostics::check_op(kind, seed);
    EXPECT_TRUE(report.passed()) << op_name(kind) << " seed " << seed << " max error " << report.max_error();
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllKinds, OpGradient,
    ::testing::Values(OpKind::kMatmul, OpKind::kConv2d, OpKind::kAdd, OpKind::kSub, OpKind::kMul, OpKind::kScalarMul,
                      OpKind::kRelu, OpKind::kSoftplus, OpKind::kSigmoid, OpKind::kSin, OpKind::kCos, OpKind::kExp,
                      OpKind::kMean, OpKind::kSum, OpKind::kReshape, OpKind::kConcat, OpKind::kAdaptiveAvgPool,
                      OpKind::kSpatialCovariance, OpKind::kL1Norm, OpKind::kSquaredL2Norm, OpKind::kBilinearSample,
                      OpKind::kTranspose),
    [](const auto& info) {
      std::string s = op_name(info.param);
      for (auto& ch : s)
        if (ch == '-') ch = '_';
      return s;
    });
