#include <cmath>

#include <gtest/gtest.h>

#include "simipu/losses.hpp"
#include "simipu/matching.hpp"
#include "simipu/verify.hpp"

using namespace simipu;
using V = diff::Var<double>;

namespace {

MatchSet diagonal_pairs(std::size_t m) {
  MatchSet s;
  for (std::size_t i = 0; i < m; ++i) s.pairs.emplace_back(i, i);
  return s;
}

V unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Tensor<double> t = verify::detail::random_tensor({n, d}, rng);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += t(r, c) * t(r, c);
    for (std::size_t c = 0; c < d; ++c) t(r, c) /= std::sqrt(s);
  }
  return V::constant(t);
}

}  // namespace

TEST(Hungarian, DiagonalOptimum) {
  CostMatrix c(3, 3);
  c << 0, 5, 5, 5, 0, 5, 5, 5, 0;
  const auto a = hungarian(c);
  EXPECT_EQ(a.pairs, (std::vector<IndexPair>{{0, 0}, {1, 1}, {2, 2}}));
  EXPECT_EQ(a.total, 0.0);
}

TEST(Hungarian, BeatsGreedyOnHandCase) {
  CostMatrix c(2, 2);
  c << 1, 2, 1, 10;
  const auto h = hungarian(c);
  EXPECT_EQ(h.pairs, (std::vector<IndexPair>{{0, 1}, {1, 0}}));
  EXPECT_EQ(h.total, 3.0);
  EXPECT_EQ(greedy_assign(c).total, 11.0);
}

TEST(Hungarian, RectangularMatchesBruteForce) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const auto r = static_cast<Eigen::Index>(1 + rng.below(8)), s = static_cast<Eigen::Index>(1 + rng.below(8));
    CostMatrix c(r, s);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < s; ++j) c(i, j) = rng.uniform(0, 10);
    const auto a = hungarian(c);
    ASSERT_EQ(a.pairs.size(), static_cast<std::size_t>(std::min(r, s)));
    EXPECT_NEAR(a.total, verify::brute_force_assignment(c), 1e-9);
  }
}

TEST(Hungarian, RejectsBadCosts) {
  CostMatrix c(2, 2);
  c << 1, -1, 0, 0;
  EXPECT_THROW(hungarian(c), ConfigError);
  c(0, 1) = std::nan("");
  EXPECT_THROW(hungarian(c), NumericError);
}

TEST(IntraMatches, CapKeepsCheapestPair) {
  const Locations a = (Locations(3, 3) << 0, 0, 0, 5, 0, 0, 10, 0, 0).finished();
  const Locations b = (Locations(3, 3) << 0.3, 0, 0, 5.1, 0, 0, 10, 0, 2).finished();
  const auto m = build_intra_matches(a, b, SimilarityTransform(), AssignAlgorithm::kHungarian, 1);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m.pairs[0], (IndexPair{1, 1}));
  EXPECT_NEAR(m.costs[0], 0.1, 1e-12);
}

TEST(IntraMatches, KnownTransformRecoversPermutation) {
  Rng rng(3);
  Locations a(8, 3);
  for (Eigen::Index i = 0; i < 8; ++i) a.row(i) << rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1);
  const auto t = SimilarityTransform::yaw(0.4, {1, -2, 0.3}, 1.03);
  const std::vector<Eigen::Index> perm{3, 7, 0, 5, 1, 6, 2, 4};
  const Locations ta = t.apply(a);
  Locations b(8, 3);
  for (Eigen::Index i = 0; i < 8; ++i) b.row(perm[static_cast<std::size_t>(i)]) = ta.row(i);
  const auto m = build_intra_matches(a, b, t, AssignAlgorithm::kHungarian, 100);
  ASSERT_EQ(m.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(m.pairs[i].second, static_cast<std::size_t>(perm[i]));
  EXPECT_LT(m.total_cost(), 1e-9);
}

TEST(MatchingSuite, Passes) {
  verify::Options opt;
  opt.matching_cases = 200;
  opt.dominance_cases = 200;
  for (const auto& r : verify::matching_suite(opt)) EXPECT_TRUE(r.passed) << r.name << " " << r.value;
}

TEST(InterMatches, PrincipalPointSamplesCenterCell) {
  CameraModel cam;
  cam.intrinsics << 100, 0, 16, 0, 100, 8, 0, 0, 1;
  cam.image_width = 32;
  cam.image_height = 16;
  Rng rng(2);
  ImageFeatureMap<double> fmap{V::constant(verify::detail::random_tensor({3, 4, 8}, rng)), 4};
  const Locations pts = (Locations(2, 3) << 0, 0, 5, 0, 0, -5).finished();
  const auto m = build_inter_matches(pts, cam, fmap, 10, rng);
  ASSERT_TRUE(m.has_value());
  ASSERT_EQ(m->matches.size(), 1u);
  EXPECT_EQ(m->matches.pairs[0], (IndexPair{0, 0}));
  EXPECT_EQ(m->coords(0, 0), 4.0);
  EXPECT_EQ(m->coords(0, 1), 2.0);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(m->sampled.value()(0, c), fmap.features.value()(c, 2, 4));
}

TEST(InterMatches, AllBehindCameraGivesNothing) {
  CameraModel cam;
  cam.intrinsics << 100, 0, 16, 0, 100, 8, 0, 0, 1;
  cam.image_width = 32;
  cam.image_height = 16;
  Rng rng(2);
  ImageFeatureMap<double> fmap{V::constant(Tensor<double>(Shape{2, 4, 8})), 4};
  const Locations pts = (Locations(2, 3) << 0, 0, -1, 1, 1, -3).finished();
  EXPECT_FALSE(build_inter_matches(pts, cam, fmap, 10, rng).has_value());
}

TEST(InterMatches, CoordsRecomputeFromProjection) {
  CameraModel cam;
  cam.intrinsics << 100, 0, 32, 0, 100, 16, 0, 0, 1;
  cam.image_width = 64;
  cam.image_height = 32;
  Rng rng(9);
  Locations pts(300, 3);
  for (Eigen::Index i = 0; i < 300; ++i) pts.row(i) << rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(-2, 20);
  ImageFeatureMap<double> fmap{V::constant(verify::detail::random_tensor({2, 8, 16}, rng)), 4};
  const auto m = build_inter_matches(pts, cam, fmap, 50, rng);
  ASSERT_TRUE(m.has_value());
  EXPECT_EQ(m->matches.size(), 50u);
  for (std::size_t i = 0; i < m->matches.size(); ++i) {
    const Eigen::Vector3d p = pts.row(static_cast<Eigen::Index>(m->matches.pairs[i].first));
    ASSERT_GT(p.z(), 0.0);
    EXPECT_NEAR(m->coords(static_cast<Eigen::Index>(i), 0), (100 * p.x() / p.z() + 32) / 4, 1e-12);
    EXPECT_NEAR(m->coords(static_cast<Eigen::Index>(i), 1), (100 * p.y() / p.z() + 16) / 4, 1e-12);
  }
}

TEST(InfoNce, UniformLogitsAndTwoKeyCase) {
  for (std::size_t m : {2u, 4u, 16u, 256u}) {
    const auto q = V::constant(Tensor<double>(Shape{m, 2}, std::vector<double>(2 * m, std::sqrt(0.5))));
    EXPECT_NEAR(info_nce(q, q, diagonal_pairs(m), {}).value()[0], std::log(static_cast<double>(m)), 1e-9);
  }
  // q . k+ = tau ln 3, q . k- = 0: loss = -ln(3 / 4)
  InfoNceOptions opt;
  opt.temperature = 1.0;
  const double c = std::log(3.0);
  const auto q = V::constant(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 0, 1}));
  const auto k = V::constant(Tensor<double>(Shape{2, 2}, std::vector<double>{c, 0, 0, c}));
  opt.require_unit_rows = false;
  EXPECT_NEAR(info_nce(q, k, diagonal_pairs(2), opt).value()[0], std::log(4.0 / 3.0), 1e-12);
}

TEST(InfoNce, OrthogonalKeysApproachZero) {
  Tensor<double> e(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) e(i, i) = 1.0;
  InfoNceOptions opt;
  opt.temperature = 0.05;
  const double l = info_nce(V::constant(e), V::constant(e), diagonal_pairs(4), opt).value()[0];
  EXPECT_LT(l, 1e-5);
  EXPECT_NEAR(l, std::log(1.0 + 3.0 * std::exp(-20.0)), 1e-15);
}

TEST(InfoNce, MonotoneInPositiveSimilarity) {
  double previous = std::numeric_limits<double>::infinity();
  for (double angle = 1.5; angle >= 0.0; angle -= 0.25) {
    Tensor<double> q(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor<double> k(Shape{2, 2}, std::vector<double>{std::cos(angle), std::sin(angle), std::sin(angle), std::cos(angle)});
    const double l = info_nce(V::constant(q), V::constant(k), diagonal_pairs(2), {}).value()[0];
    EXPECT_LT(l, previous);
    previous = l;
  }
}

TEST(InfoNce, RejectsDegenerateInputs) {
  Rng rng(1);
  const auto q = unit_rows(3, 4, rng);
  EXPECT_THROW(info_nce(q, q, diagonal_pairs(1), {}), DegenerateBatchError);
  MatchSet dup;
  dup.pairs = {{0, 1}, {1, 1}};
  EXPECT_THROW(info_nce(q, q, dup, {}), ConfigError);
  const auto raw = V::constant(Tensor<double>(Shape{3, 4}, 2.0));
  EXPECT_THROW(info_nce(raw, q, diagonal_pairs(3), {}), ConfigError);
}

TEST(TotalLoss, WeightAblations) {
  const auto a = V::constant(Tensor<double>(Shape{1}, 1.7));
  const auto b = V::constant(Tensor<double>(Shape{1}, 0.4));
  EXPECT_EQ(total_loss(a, b, LossWeights{1.0, 0.0, 0.07}).value()[0], 1.7);
  EXPECT_EQ(total_loss(a, b, LossWeights{0.0, 1.0, 0.07}).value()[0], 0.4);
  EXPECT_DOUBLE_EQ(total_loss(a, b, LossWeights{2.0, 0.5, 0.07}).value()[0], 3.6);
  EXPECT_THROW((LossWeights{0.0, 0.0, 0.07}.validate()), ConfigError);
}

TEST(InterLoss, PointSideGetsNoGradient) {
  Rng rng(4);
  auto alpha = V::parameter(unit_rows(5, 3, rng).value());
  auto gamma = V::parameter(unit_rows(5, 3, rng).value());
  diff::backward(inter_loss(alpha, gamma, diagonal_pairs(5), {}));
  const Tensor<double> ga = alpha.grad(), gg = gamma.grad();
  for (double g : ga.to_vector()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : gg.to_vector()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(SiLoss, PerfectPredictionAndOffset) {
  const std::vector<double> depth{2.0, 5.0, 11.0, 30.0};
  const std::vector<bool> valid{true, true, false, true};
  Tensor<double> pred(Shape{4});
  for (std::size_t i = 0; i < 4; ++i) pred[i] = std::log(depth[i]);
  EXPECT_EQ(si_loss(V::constant(pred), depth, valid, {}).value()[0], 0.0);
  for (auto& v : pred.data()) v += 0.3;
  EXPECT_NEAR(si_loss(V::constant(pred), depth, valid, {}).value()[0], 10 * 0.3 * std::sqrt(0.15), 1e-12);
  EXPECT_THROW(si_loss(V::constant(pred), depth, std::vector<bool>(4, false), {}), EmptyTargetError);
}

TEST(LossesSuite, Passes) {
  for (const auto& r : verify::losses_suite(verify::Options{})) EXPECT_TRUE(r.passed) << r.name << " " << r.value;
}
