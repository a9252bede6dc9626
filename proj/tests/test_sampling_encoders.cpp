#include <algorithm>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "simipu/dataio.hpp"
#include "simipu/encoders.hpp"
#include "simipu/sampling.hpp"
#include "simipu/verify.hpp"

using namespace simipu;

namespace {

Locations random_locations(std::size_t n, Rng& rng, double extent = 10.0) {
  Locations l(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index i = 0; i < l.rows(); ++i) l.row(i) << rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-2, 2);
  return l;
}

// Textbook FPS written from scratch against a distance callback.
template <class Dist>
std::vector<std::size_t> reference_fps(std::size_t n, std::size_t k, std::size_t start, Dist dist) {
  std::vector<std::size_t> out{start};
  while (out.size() < k) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::find(out.begin(), out.end(), j) != out.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t i : out) d = std::min(d, dist(i, j));
      if (d > best_d) {
        best_d = d;
        best = j;
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST(DFps, LineAndSquareCases) {
  const Locations line = (Locations(3, 3) << 0, 0, 0, 1, 0, 0, 10, 0, 0).finished();
  EXPECT_EQ(d_fps(line, 2, 0), (std::vector<std::size_t>{0, 2}));

  const Locations square = (Locations(5, 3) << 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0, 0.5, 0.5, 0).finished();
  auto picks = d_fps(square, 4, 0);
  std::sort(picks.begin(), picks.end());
  EXPECT_EQ(picks, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(DFps, MatchesReferenceAndRejectsBadK) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto loc = random_locations(60, rng);
    const std::size_t start = static_cast<std::size_t>(rng.below(60));
    const auto ref = reference_fps(60, 12, start, [&](std::size_t a, std::size_t b) { return (loc.row(a) - loc.row(b)).squaredNorm(); });
    EXPECT_EQ(d_fps(loc, 12, start), ref);
  }
  const Locations loc = Locations::Zero(3, 3);
  EXPECT_THROW(d_fps(loc, 4), ConfigError);
  EXPECT_THROW(d_fps(loc, 0), ConfigError);
  EXPECT_THROW(d_fps(loc, 1, 3), ConfigError);
}

TEST(FFps, IdenticalFeaturesTieToLowestIndex) {
  const std::vector<double> f(6 * 2, 0.5);
  EXPECT_EQ(f_fps(f, 2, 3, 4), (std::vector<std::size_t>{4, 0, 1}));
}

TEST(FFps, LocationFeaturesReproduceDFps) {
  Rng rng(23);
  const auto loc = random_locations(40, rng);
  std::vector<double> f(loc.data(), loc.data() + loc.size());
  EXPECT_EQ(f_fps(f, 3, 10, 5), d_fps(loc, 10, 5));
}

TEST(FFps, MatchesReferenceInHighDimension) {
  Rng rng(29);
  const std::size_t n = 50, d = 7;
  std::vector<double> f(n * d);
  for (auto& v : f) v = rng.uniform(-1, 1);
  auto dist = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += (f[a * d + c] - f[b * d + c]) * (f[a * d + c] - f[b * d + c]);
    return s;
  };
  EXPECT_EQ(f_fps(f, d, 9, 2), reference_fps(n, 9, 2, dist));
}

TEST(FusedSample, HalvesAreDistinctAndDFpsFirst) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto loc = random_locations(64, rng);
    std::vector<double> f(64 * 4);
    for (auto& v : f) v = rng.uniform();
    const auto picks = fused_sample(loc, f, 4, 16, 3);
    ASSERT_EQ(picks.size(), 16u);
    EXPECT_EQ(std::set<std::size_t>(picks.begin(), picks.end()).size(), 16u);
    EXPECT_EQ(std::vector<std::size_t>(picks.begin(), picks.begin() + 8), d_fps(loc, 8, 3));
  }
  EXPECT_THROW(fused_sample(random_locations(10, rng), std::vector<double>(10, 0.0), 1, 3), ConfigError);
}

TEST(BallGroup, IsolatedCenterKeepsOnlyItself) {
  const Locations loc = (Locations(3, 3) << 0, 0, 0, 5, 0, 0, 0, 5, 0).finished();
  Rng rng(0);
  const auto g = ball_group(loc, {1}, 1.0, 8, rng);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0].member_indices, (std::vector<std::size_t>{1}));
  EXPECT_EQ(g[0].relative_offsets.row(0).norm(), 0.0);
}

TEST(BallGroup, SaturatedGroupKeepsCenterAndCap) {
  Rng gen(3);
  Locations loc = random_locations(100, gen, 0.2);
  Rng rng(5);
  const auto g = ball_group(loc, {7}, 10.0, 16, rng);
  ASSERT_EQ(g[0].member_indices.size(), 16u);
  EXPECT_EQ(g[0].member_indices.front(), 7u);
  EXPECT_TRUE(std::is_sorted(g[0].member_indices.begin() + 1, g[0].member_indices.end()));
}

TEST(BallGroup, MatchesBruteForceWhenUnsaturated) {
  Rng gen(41);
  const auto loc = random_locations(80, gen, 3.0);
  Rng rng(1);
  const std::vector<std::size_t> centers{0, 13, 42};
  const auto groups = ball_group(loc, centers, 1.5, 1000, rng);
  for (std::size_t g = 0; g < centers.size(); ++g) {
    std::vector<std::size_t> expected{centers[g]};
    for (std::size_t j = 0; j < 80; ++j) {
      if (j != centers[g] && (loc.row(j) - loc.row(centers[g])).squaredNorm() <= 1.5 * 1.5) expected.push_back(j);
    }
    EXPECT_EQ(groups[g].member_indices, expected);
    for (std::size_t i = 0; i < expected.size(); ++i) {
      EXPECT_EQ(groups[g].relative_offsets.row(i), loc.row(expected[i]) - loc.row(centers[g]));
    }
  }
}

TEST(Encoders, DefaultShapes) {
  const EncoderConfig cfg;
  Rng rng(2);
  auto params = init_params<double>(cfg, rng);
  const auto scene = generate_scene(5, SceneConfig{});
  ASSERT_EQ(scene.cloud.size(), 1024u);
  const auto set = encode_points(scene.cloud, params, cfg, rng, StartPolicy::kZero);
  EXPECT_EQ(set.features.shape(), (Shape{128, 128}));
  EXPECT_EQ(set.size(), 128u);
  EXPECT_EQ(set.source_indices.size(), 128u);

  const auto fmap = encode_image(diff::Var<double>::constant(scene.image), params, cfg);
  EXPECT_EQ(scene.image.shape(), (Shape{3, 128, 384}));
  EXPECT_EQ(fmap.features.shape(), (Shape{64, 16, 48}));
  EXPECT_EQ(fmap.stride, 8u);
}

TEST(Encoders, CanonicalStartIsPermutationInvariant) {
  EncoderConfig cfg;
  cfg.point_stages = {{64, 8, 1.5, 8}, {16, 8, 3.0, 8}};
  cfg.image_channels = {4};
  cfg.embedding_dim = 8;
  Rng init(3);
  const auto params = init_params<double>(cfg, init);

  SceneConfig sc;
  sc.points = 256;
  const auto scene = generate_scene(9, sc);
  std::vector<Eigen::Index> perm(scene.cloud.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng shuffle(4);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);
  Points shuffled(scene.cloud.points().rows(), 4);
  for (Eigen::Index i = 0; i < shuffled.rows(); ++i) shuffled.row(i) = scene.cloud.points().row(perm[static_cast<std::size_t>(i)]);

  // max_neighbors exceeds every ball so grouping never draws from the rng
  cfg.point_stages = {{64, 8, 1.5, 300}, {16, 8, 3.0, 300}};
  Rng ra(0), rb(0);
  const auto a = encode_points(scene.cloud, params, cfg, ra, StartPolicy::kCanonical);
  const auto b = encode_points(PointCloud(shuffled), params, cfg, rb, StartPolicy::kCanonical);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.locations.row(i), b.locations.row(i));
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(a.features.value()(i, c), b.features.value()(i, c), 1e-12);
  }
}

TEST(Encoders, UndersizedCloudIsRejected) {
  const EncoderConfig cfg;
  Rng rng(1);
  const auto params = init_params<double>(cfg, rng);
  Points p = Points::Zero(100, 4);
  EXPECT_THROW(encode_points(PointCloud(p), params, cfg, rng), UndersizedSceneError);
}

TEST(ProjectHead, RowsHaveUnitNorm) {
  EncoderConfig cfg;
  cfg.embedding_dim = 16;
  Rng rng(6);
  const auto params = init_params<double>(cfg, rng);
  const auto x = diff::Var<double>::constant(verify::detail::random_tensor({10, cfg.point_feature_dim()}, rng));
  const auto z = project_head(x, params.point_head).value();
  for (std::size_t i = 0; i < 10; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 16; ++c) s += z(i, c) * z(i, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ProjectHead, ZeroInputStillUnitNorm) {
  EncoderConfig cfg;
  cfg.embedding_dim = 6;
  Rng rng(7);
  auto params = init_params<double>(cfg, rng);
  Tensor<double> b(Shape{6});
  for (auto& v : b.data()) v = rng.uniform(0.2, 0.6);
  params.point_head.output.bias = diff::Var<double>::parameter(b);
  const auto z = project_head(diff::Var<double>::constant(Tensor<double>(Shape{3, cfg.point_feature_dim()})), params.point_head).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += z(i, c) * z(i, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}
