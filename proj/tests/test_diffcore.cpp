#include <cmath>

#include <gtest/gtest.h>

#include "simipu/diffcore.hpp"
#include "simipu/verify.hpp"

using namespace simipu;
using V = diff::Var<double>;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>(Shape{r, c}, std::move(v)); }

}  // namespace

TEST(Matmul, IdentityAndZero) {
  const auto a = V::constant(mat(2, 2, {1, 2, 3, 4}));
  const auto eye = V::constant(mat(2, 2, {1, 0, 0, 1}));
  EXPECT_EQ(diff::matmul(a, eye).value().to_vector(), (std::vector<double>{1, 2, 3, 4}));
  const auto z = V::constant(mat(2, 2, {0, 0, 0, 0}));
  const auto b = V::constant(mat(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(diff::matmul(z, b).value().to_vector(), (std::vector<double>{0, 0, 0, 0}));
}

TEST(Matmul, RejectsMismatchedInner) {
  const auto a = V::constant(Tensor<double>(Shape{2, 3}));
  const auto b = V::constant(Tensor<double>(Shape{2, 3}));
  EXPECT_THROW(diff::matmul(a, b), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesDifferences) {
  Rng rng(3);
  const auto b = verify::detail::random_tensor({4, 2}, rng);
  const auto x = verify::detail::random_tensor({3, 4}, rng);
  const auto rep = diff::grad_check([&](const V& a) { return diff::sum(diff::matmul(a, V::constant(b))); }, x);
  EXPECT_TRUE(rep.passed) << rep.max_error;
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(1);
  const auto x = V::constant(verify::detail::random_tensor({2, 5, 4}, rng));
  Tensor<double> k(Shape{2, 2, 1, 1});
  k[0] = 1.0;
  k[3] = 1.0;
  const auto y = diff::conv2d(x, V::constant(k), 1, 0);
  EXPECT_EQ(y.value().to_vector(), x.value().to_vector());
}

TEST(Conv2d, ConstantImageInteriorSum) {
  const auto x = V::constant(Tensor<double>(Shape{1, 6, 6}, 3.0));
  const auto k = V::constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0));
  const auto y = diff::conv2d(x, k, 1, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 8}));
  EXPECT_DOUBLE_EQ(y.value()(0, 4, 4), 27.0);
  EXPECT_DOUBLE_EQ(y.value()(0, 0, 0), 3.0);
}

TEST(Conv2d, RejectsNonIntegralOutput) {
  const auto x = V::constant(Tensor<double>(Shape{1, 6, 6}));
  const auto k = V::constant(Tensor<double>(Shape{1, 1, 3, 3}));
  EXPECT_THROW(diff::conv2d(x, k, 2, 0), ConfigError);
  const auto even = V::constant(Tensor<double>(Shape{1, 1, 2, 2}));
  EXPECT_THROW(diff::conv2d(x, even, 1, 0), ConfigError);
}

TEST(Elementwise, ReluAndNormalize) {
  const auto r = diff::relu(V::constant(Tensor<double>(Shape{3}, std::vector<double>{-1, 0, 2})));
  EXPECT_EQ(r.value().to_vector(), (std::vector<double>{0, 0, 2}));
  const auto n = diff::l2_normalize(V::constant(mat(1, 2, {3, 4})));
  EXPECT_NEAR(n.value()(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(n.value()(0, 1), 0.8, 1e-15);
  const auto u = diff::l2_normalize(V::constant(mat(1, 3, {0, 1, 0})));
  EXPECT_EQ(u.value().to_vector(), (std::vector<double>{0, 1, 0}));
}

TEST(StopGradient, ValueKeptGradientBlocked) {
  auto x = V::parameter(mat(2, 2, {1, -2, 3, 0.5}));
  const auto s = diff::stop_gradient(x);
  EXPECT_EQ(s.value().to_vector(), x.value().to_vector());
  diff::backward(diff::sum(s));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{0, 0, 0, 0}));

  x.zero_grad();
  diff::backward(diff::sum(diff::add(x, diff::stop_gradient(x))));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{1, 1, 1, 1}));
}

TEST(GradCheck, LinearFunctionIsExact) {
  const auto rep = diff::grad_check([](const V& x) { return diff::scale(diff::sum(x), 2.0); },
                                    Tensor<double>(Shape{5}, std::vector<double>{0.1, -3, 2, 7, 0}));
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_error, 1e-9);
}

TEST(GradCheck, WrongBackwardIsCaught) {
  Rng rng(11);
  const auto x = verify::detail::kink_free_tensor({4, 4}, rng);
  const auto rep = diff::grad_check([](const V& v) { return diff::sum(verify::detail::mutated_relu(v)); }, x);
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_error, 1e-1);
}

TEST(GradCheck, RejectsVectorOutput) {
  EXPECT_THROW(diff::grad_check([](const V& x) { return x; }, Tensor<double>(Shape{3})), DimensionError);
}

TEST(Backward, AccumulatesThroughSharedInputs) {
  auto x = V::parameter(Tensor<double>(Shape{2}, std::vector<double>{1.5, -2}));
  diff::backward(diff::sum(diff::mul(x, x)));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{3, -4}));
}

TEST(SegmentMax, PoolsPerGroup) {
  const auto y = diff::segment_max(V::constant(mat(4, 2, {1, 5, 3, 2, -1, -4, -2, -3})), 2);
  EXPECT_EQ(y.value().to_vector(), (std::vector<double>{3, 5, -1, -3}));
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogWidth) {
  const auto l = diff::softmax_cross_entropy(V::constant(Tensor<double>(Shape{2, 8}, 0.3)),
                                             std::vector<std::size_t>{0, 7});
  EXPECT_NEAR(l.value()[0], std::log(8.0), 1e-12);
  EXPECT_NEAR(l.value()[1], std::log(8.0), 1e-12);
}

TEST(ChannelNorm, BatchModeStandardizesAndUpdatesStats) {
  Rng rng(5);
  const auto x = V::constant(verify::detail::random_tensor({2, 4, 4}, rng, 2.0, 6.0));
  auto stats = diff::NormStats<double>::identity(2);
  const auto one = V::constant(Tensor<double>(Shape{2}, 1.0));
  const auto zero = V::constant(Tensor<double>(Shape{2}));
  const auto y = diff::channel_norm(x, one, zero, stats, diff::NormMode::kBatch, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 16; ++i) mean += y.value()[c * 16 + i];
    EXPECT_NEAR(mean / 16.0, 0.0, 1e-12);
    EXPECT_GT(stats.mean[c], 0.1);
  }
  auto frozen = stats;
  diff::channel_norm(x, one, zero, frozen, diff::NormMode::kFrozen, true);
  EXPECT_EQ(frozen.mean.to_vector(), stats.mean.to_vector());
}

TEST(VerifySuite, GradcheckSuitePasses) {
  const auto results = verify::gradcheck_suite(verify::Options{});
  for (const auto& r : results) EXPECT_TRUE(r.passed) << r.name << " error " << r.value << " " << r.detail;
}

TEST(VerifySuite, InjectedFaultFailsSuite) {
  verify::Options opt;
  opt.cases = 3;
  opt.inject_fault = true;
  const auto results = verify::gradcheck_suite(opt);
  EXPECT_FALSE(verify::all_passed(results));
  bool relu_failed = false;
  for (const auto& r : results) relu_failed = relu_failed || (r.name == "relu" && !r.passed);
  EXPECT_TRUE(relu_failed);
}
