#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd_oracle.hpp"
#include "hmode/ops.hpp"
#include "hmode/tensor.hpp"

namespace hmode {
namespace {

using testing::max_relative_fd_error;
using testing::random_tensor;
using testing::weighted_sum;
using T64 = Tensor<double>;

class TensorTest : public ::testing::Test {
 protected:
  void SetUp() override { Tape<double>::active().clear(); }
  void TearDown() override { Tape<double>::active().clear(); }
};

// Straight nested-loop cross-correlation, zero padded.
std::vector<double> conv_oracle(const T64& x, const T64& k, const T64& b, int pad) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = k.dim(0), ks = k.dim(2);
  const int oh = h + 2 * pad - ks + 1, ow = w + 2 * pad - ks + 1;
  std::vector<double> out(cout * oh * ow);
  for (int co = 0; co < cout; ++co)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        double acc = b[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < ks; ++ky)
            for (int kx = 0; kx < ks; ++kx) {
              const int iy = y + ky - pad, ix = xx + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x.at(ci, iy, ix) * k[((co * cin + ci) * ks + ky) * ks + kx];
            }
        out[(co * oh + y) * ow + xx] = acc;
      }
  return out;
}

TEST_F(TensorTest, ConstructorRejectsMismatchedValues) {
  EXPECT_THROW(T64({2, 2}, {1.0, 2.0, 3.0}), InvalidShape);
  EXPECT_THROW(T64({0, 2}, {}), InvalidShape);
}

TEST_F(TensorTest, ConvPointKernelScales) {
  auto x = T64::full({1, 3, 3}, 1.0);
  auto k = T64::full({1, 1, 1, 1}, 2.0);
  auto b = T64::zeros({1});
  auto y = ops::conv2d(x, k, b, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3}));
  for (double v : y.values()) EXPECT_EQ(v, 2.0);
}

TEST_F(TensorTest, ConvPaddedAllOnesKernelMatchesOracle) {
  T64 x({1, 2, 2}, {1, 2, 3, 4});
  auto k = T64::full({1, 1, 3, 3}, 1.0);
  auto b = T64::zeros({1});
  auto y = ops::conv2d(x, k, b, 1);
  const auto expected = conv_oracle(x, k, b, 1);
  // Every 3x3 window centred inside a 2x2 map covers all four pixels.
  EXPECT_EQ(y.at(0, 0, 0), 10.0);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(y[i], expected[i]);
}

TEST_F(TensorTest, ConvRandomMatchesOracle) {
  std::mt19937_64 rng(7);
  for (int pad : {0, 1, 2}) {
    auto x = random_tensor({3, 6, 5}, rng, -1, 1, false);
    auto k = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
    auto b = random_tensor({4}, rng, -1, 1, false);
    auto y = ops::conv2d(x, k, b, pad);
    const auto expected = conv_oracle(x, k, b, pad);
    ASSERT_EQ(y.numel(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
  }
}

TEST_F(TensorTest, ConvMatchesOracleAcrossExtents) {
  // Covers both the few-output-pixel and the row-wise code paths.
  std::mt19937_64 rng(8);
  const std::pair<std::size_t, std::size_t> extents[] = {{1, 1}, {2, 2}, {4, 4}, {5, 3}, {8, 8}, {3, 17}};
  for (const auto& [h, w] : extents) {
    auto x = random_tensor({5, h, w}, rng, -1, 1, false);
    auto k = random_tensor({3, 5, 3, 3}, rng, -1, 1, false);
    auto b = random_tensor({3}, rng, -1, 1, false);
    auto y = ops::conv2d(x, k, b, 1);
    const auto expected = conv_oracle(x, k, b, 1);
    ASSERT_EQ(y.numel(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
  }
}

TEST_F(TensorTest, ConvGradientOnTinyExtents) {
  std::mt19937_64 rng(12);
  for (std::size_t s : {1u, 2u, 3u}) {
    std::vector<T64> in{random_tensor({3, s, s}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({2}, rng)};
    auto f = [](const std::vector<T64>& v) { return weighted_sum(ops::conv2d(v[0], v[1], v[2], 1), 5); };
    EXPECT_LT(max_relative_fd_error(f, in), 1e-5) << s;
  }
}

TEST_F(TensorTest, ConvRejectsChannelMismatch) {
  auto x = T64::zeros({2, 4, 4});
  auto k = T64::zeros({1, 3, 3, 3});
  EXPECT_THROW(ops::conv2d(x, k, T64::zeros({1}), 1), InvalidShape);
}

TEST_F(TensorTest, ConvGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::vector<T64> in{random_tensor({2, 5, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                      random_tensor({3}, rng)};
  auto sum_conv = [](const std::vector<T64>& v) { return ops::sum(ops::conv2d(v[0], v[1], v[2], 1)); };
  EXPECT_LT(max_relative_fd_error(sum_conv, in), 1e-5);
  auto weighted = [](const std::vector<T64>& v) {
    return weighted_sum(ops::conv2d(v[0], v[1], v[2], 0), 3);
  };
  EXPECT_LT(max_relative_fd_error(weighted, in), 1e-4);
}

TEST_F(TensorTest, ReluAndSigmoidValues) {
  T64 x({2}, {-1.0, 3.0});
  auto r = ops::relu(x);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 3.0);
  EXPECT_EQ(ops::sigmoid(T64::scalar(0.0)).item(), 0.5);
  // Saturated inputs stay inside the clamp band.
  auto s = ops::sigmoid(T64({2}, {-100.0, 100.0}));
  EXPECT_EQ(s[0], ops::kSigmoidEpsilon);
  EXPECT_EQ(s[1], 1.0 - ops::kSigmoidEpsilon);
}

TEST_F(TensorTest, ReluSubgradientAtZeroIsZero) {
  auto x = T64::scalar(0.0, true);
  backward(ops::relu(x));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST_F(TensorTest, SigmoidDerivativeMatchesFiniteDifferences) {
  auto x = T64::scalar(1.0, true);
  backward(ops::sigmoid(x));
  const double h = 1e-5;
  double up, down;
  {
    NoGradGuard<double> guard;
    up = ops::sigmoid(T64::scalar(1.0 + h)).item();
    down = ops::sigmoid(T64::scalar(1.0 - h)).item();
  }
  EXPECT_NEAR(x.grad()[0], (up - down) / (2 * h), 1e-6);
}

TEST_F(TensorTest, ElementwiseRejectsIncompatibleShapes) {
  EXPECT_THROW(ops::add(T64::zeros({2, 2}), T64::zeros({3})), InvalidShape);
  EXPECT_THROW(ops::mul(T64::zeros({2, 2}), T64::zeros({2, 1, 2})), InvalidShape);
}

TEST_F(TensorTest, ScalarBroadcastBothSides) {
  T64 a({3}, {1, 2, 3});
  auto s = T64::scalar(2.0);
  auto l = ops::mul(s, a);
  auto r = ops::sub(a, s);
  EXPECT_EQ(l[2], 6.0);
  EXPECT_EQ(r[0], -1.0);
}

TEST_F(TensorTest, SoftmaxSymmetricCases) {
  std::vector<T64> two{T64::zeros({3, 3}), T64::zeros({3, 3})};
  for (const auto& m : ops::softmax_group<double>(two)) {
    for (double v : m.values()) EXPECT_EQ(v, 0.5);
  }
  std::vector<T64> three{T64::full({1}, 1.0), T64::full({1}, 1.0), T64::full({1}, 1.0)};
  for (const auto& m : ops::softmax_group<double>(three)) EXPECT_NEAR(m.item(), 1.0 / 3, 1e-15);
  EXPECT_THROW(ops::softmax_group<double>(std::vector<T64>{}), InvalidArgument);
}

TEST_F(TensorTest, SoftmaxRandomSumsToOneAndGradientChecks) {
  std::mt19937_64 rng(5);
  std::vector<T64> maps;
  for (int j = 0; j < 4; ++j) maps.push_back(random_tensor({4, 5}, rng, -10, 10));
  auto out = ops::softmax_group<double>(maps);
  for (std::size_t p = 0; p < 20; ++p) {
    double s = 0;
    for (const auto& o : out) s += o[p];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  std::vector<T64> small;
  for (int j = 0; j < 3; ++j) small.push_back(random_tensor({3, 4}, rng));
  auto f = [](const std::vector<T64>& v) {
    auto o = ops::softmax_group<double>(v);
    return ops::add(weighted_sum(o[0], 1), ops::add(weighted_sum(o[1], 2), weighted_sum(o[2], 3)));
  };
  EXPECT_LT(max_relative_fd_error(f, small), 1e-4);
}

TEST_F(TensorTest, UpsampleConstantAndPassthrough) {
  auto c = ops::upsample_bilinear(T64::full({2, 3, 5}, 1.25), 7, 11);
  for (double v : c.values()) EXPECT_DOUBLE_EQ(v, 1.25);
  auto one = ops::upsample_bilinear(T64::full({1, 1}, 7.0), 4, 4);
  ASSERT_EQ(one.shape(), (Shape{4, 4}));
  for (double v : one.values()) EXPECT_EQ(v, 7.0);
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 3}, rng, -1, 1, false);
  auto same = ops::upsample_bilinear(x, 3, 3);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same[i], x[i]);
  EXPECT_THROW(ops::upsample_bilinear(x, 0, 4), InvalidArgument);
}

TEST_F(TensorTest, UpsampleTwoToFourMatchesHandInterpolation) {
  // Half-pixel sampling of 2 -> 4 reads source coordinates
  // -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]: interpolation weights
  // t = 0, 0.25, 0.75, 1. For [[1,2],[3,4]] the value is 1 + 2 t_y + t_x.
  T64 x({2, 2}, {1, 2, 3, 4});
  auto y = ops::upsample_bilinear(x, 4, 4);
  const double t[4] = {0.0, 0.25, 0.75, 1.0};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.at(i, j), 1 + 2 * t[i] + t[j], 1e-6);
}

TEST_F(TensorTest, UpsampleGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  std::vector<T64> in{random_tensor({2, 3, 4}, rng)};
  auto f = [](const std::vector<T64>& v) { return weighted_sum(ops::upsample_bilinear(v[0], 7, 9), 4); };
  EXPECT_LT(max_relative_fd_error(f, in), 1e-4);
}

TEST_F(TensorTest, BlockSumValuesMassAndGradient) {
  auto y = ops::block_sum(T64::full({4, 4}, 1.0), 2);
  ASSERT_EQ(y.shape(), (Shape{2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 4.0);
  EXPECT_THROW(ops::block_sum(T64::zeros({5, 4}), 2), InvalidShape);

  std::mt19937_64 rng(2);
  auto x = random_tensor({6, 9}, rng, -10, 10);
  auto b = ops::block_sum(x, 3);
  double in_total = 0, abs_total = 0, out_total = 0;
  for (double v : x.values()) in_total += v, abs_total += std::abs(v);
  for (double v : b.values()) out_total += v;
  EXPECT_LT(std::abs(in_total - out_total), 1e-4 * abs_total);

  // d(cell (1,2))/dx is the indicator of rows 3..5, columns 6..8.
  backward(ops::gather(b, std::vector<std::size_t>{1 * 3 + 2}));
  const auto g = x.grad();
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 9; ++c) EXPECT_EQ(g[r * 9 + c], (r >= 3 && c >= 6) ? 1.0 : 0.0);
}

TEST_F(TensorTest, MaxPoolGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::vector<T64> in{random_tensor({2, 4, 6}, rng)};
  auto f = [](const std::vector<T64>& v) { return weighted_sum(ops::max_pool2x2(v[0]), 8); };
  EXPECT_LT(max_relative_fd_error(f, in), 1e-4);
  EXPECT_THROW(ops::max_pool2x2(T64::zeros({1, 3, 4})), InvalidShape);
}

TEST_F(TensorTest, ReduceSumAndMean) {
  T64 x({2, 2}, {1, 2, 3, 4}, true);
  EXPECT_EQ(ops::sum(x).item(), 10.0);
  EXPECT_EQ(ops::mean(x).item(), 2.5);
  backward(ops::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST_F(TensorTest, BackwardSimpleChains) {
  auto x = T64::scalar(5.0, true);
  backward(ops::scale(x, 3.0));
  EXPECT_EQ(x.grad()[0], 3.0);

  auto z = T64::scalar(2.0, true);
  backward(ops::mul(z, z));
  EXPECT_EQ(z.grad()[0], 4.0);
}

TEST_F(TensorTest, BackwardAccumulatesUntilZeroed) {
  auto x = T64::scalar(2.0, true);
  auto y = ops::mul(x, x);
  backward(y);
  backward(y);
  EXPECT_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  backward(y);
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST_F(TensorTest, BackwardRejectsNonScalarAndForeignRoots) {
  auto x = T64::full({2}, 1.0, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), InvalidArgument);
  EXPECT_THROW(backward(T64::scalar(1.0, true)), InvalidArgument);
}

TEST_F(TensorTest, NoGradGuardSkipsRecording) {
  auto x = T64::full({2}, 1.0, true);
  {
    NoGradGuard<double> guard;
    auto y = ops::sum(x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(Tape<double>::active().size(), 0u);
}

TEST_F(TensorTest, EveryDifferentiableOpPassesFiniteDifferences) {
  std::mt19937_64 rng(1234);
  using Fn = std::function<T64(const std::vector<T64>&)>;
  struct Case {
    const char* name;
    Fn f;
    std::vector<Shape> shapes;
  };
  const std::vector<Case> cases = {
      {"add", [](auto& v) { return weighted_sum(ops::add(v[0], v[1]), 1); }, {{3, 4}, {3, 4}}},
      {"sub_scalar", [](auto& v) { return weighted_sum(ops::sub(v[0], v[1]), 2); }, {{3, 4}, {1}}},
      {"mul", [](auto& v) { return weighted_sum(ops::mul(v[0], v[1]), 3); }, {{3, 4}, {3, 4}}},
      {"div", [](auto& v) { return weighted_sum(ops::div(v[0], ops::add(v[1], T64::scalar(3.0))), 4); },
       {{3, 4}, {3, 4}}},
      {"scale", [](auto& v) { return weighted_sum(ops::scale(v[0], -1.5), 5); }, {{5}}},
      {"relu", [](auto& v) { return weighted_sum(ops::relu(v[0]), 6); }, {{4, 4}}},
      {"sigmoid", [](auto& v) { return weighted_sum(ops::sigmoid(v[0]), 7); }, {{4, 4}}},
      {"block_sum", [](auto& v) { return weighted_sum(ops::block_sum(v[0], 2), 8); }, {{2, 4, 6}}},
      {"mean", [](auto& v) { return ops::mean(ops::mul(v[0], v[0])); }, {{3, 3}}},
      {"concat", [](auto& v) { return weighted_sum(ops::concat_channels(v[0], v[1]), 9); },
       {{1, 2, 3}, {2, 2, 3}}},
      {"channel", [](auto& v) { return weighted_sum(ops::channel(v[0], 1), 10); }, {{3, 2, 2}}},
      {"mul_channels", [](auto& v) { return weighted_sum(ops::mul_channels(v[0], v[1]), 11); },
       {{3, 2, 3}, {1, 2, 3}}},
      {"reshape", [](auto& v) { return weighted_sum(ops::reshape(v[0], {6}), 12); }, {{2, 3}}},
      {"stack", [](auto& v) { return weighted_sum(ops::stack<double>(v), 13); }, {{2}, {1}, {3}}},
      {"bce",
       [](auto& v) {
         auto target = T64({2, 2}, {0.0, 1.0, 1.0, 0.0});
         return ops::binary_cross_entropy(ops::sigmoid(v[0]), target);
       },
       {{2, 2}}},
  };
  for (const auto& c : cases) {
    std::vector<T64> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng));
    EXPECT_LT(max_relative_fd_error(c.f, inputs), 1e-4) << c.name;
  }
}

TEST_F(TensorTest, NoNonFiniteValuesOnWideInputs) {
  std::mt19937_64 rng(99);
  auto x = random_tensor({2, 8, 8}, rng, -10, 10);
  auto k = random_tensor({3, 2, 3, 3}, rng, -10, 10);
  auto b = random_tensor({3}, rng, -10, 10);
  auto h = ops::conv2d(x, k, b, 1);
  auto p = ops::max_pool2x2(ops::relu(h));
  auto u = ops::upsample_bilinear(p, 8, 8);
  std::vector<T64> parts{ops::channel(u, 0), ops::channel(u, 1), ops::channel(u, 2)};
  auto sm = ops::softmax_group<double>(parts);
  auto s = ops::sigmoid(ops::channel(h, 0));
  auto loss = ops::add(ops::sum(ops::mul(sm[0], ops::channel(u, 2))), ops::mean(s));
  backward(loss);
  for (const auto* t : {&x, &k, &b}) {
    for (double g : t->grad()) EXPECT_TRUE(std::isfinite(g));
  }
  for (const auto* t : {&h, &u, &s}) {
    for (double v : t->values()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST_F(TensorTest, ForwardIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(42);
    auto x = random_tensor({3, 16, 16}, rng, 0, 1, false);
    auto k = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
    auto y = ops::conv2d(x, k, Tensor<double>::zeros({4}), 1);
    return std::vector<double>(y.values().begin(), y.values().end());
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace hmode
