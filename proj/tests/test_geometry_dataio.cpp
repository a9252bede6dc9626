#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "simipu/dataio.hpp"
#include "simipu/geometry.hpp"
#include "simipu/verify.hpp"

using namespace simipu;
namespace fs = std::filesystem;

namespace {

PointCloud cloud_of(std::initializer_list<std::array<double, 4>> rows) {
  Points p(static_cast<Eigen::Index>(rows.size()), 4);
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    p.row(i++) << r[0], r[1], r[2], r[3];
  }
  return PointCloud(p);
}

CameraModel axis_camera() {
  CameraModel cam;
  cam.intrinsics << 700.0, 0.0, 600.0, 0.0, 700.0, 180.0, 0.0, 0.0, 1.0;
  cam.image_width = 1242;
  cam.image_height = 375;
  return cam;
}

std::string fixture_text() { return read_file(fs::path(SIMIPU_TEST_DATA_DIR) / "kitti_000000_calib.txt"); }

}  // namespace

TEST(Transform, IdentityAndHandCases) {
  const auto c = cloud_of({{1, 2, 3, 0.2}, {-4, 0.5, 9, 1.0}});
  EXPECT_EQ(apply_transform(c, SimilarityTransform()).points(), c.points());

  const auto r = apply_transform(cloud_of({{1, 0, 0, 0.5}}), SimilarityTransform::yaw(std::numbers::pi / 2));
  EXPECT_NEAR(r.points()(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(r.points()(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(r.points()(0, 2), 0.0, 1e-15);
  EXPECT_EQ(r.points()(0, 3), 0.5);

  const auto s = apply_transform(cloud_of({{1, 2, 3, 0}}), SimilarityTransform(Eigen::Matrix3d::Identity(), {1, 0, 0}, 2.0));
  EXPECT_EQ(s.locations(), (Locations(1, 3) << 3, 4, 6).finished());
}

TEST(Transform, RejectsImproperRotation) {
  Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
  flip(2, 2) = -1.0;
  EXPECT_THROW(SimilarityTransform(flip, Eigen::Vector3d::Zero(), 1.0), ConfigError);
  EXPECT_THROW(SimilarityTransform(Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), 0.0), ConfigError);
}

TEST(SampleTransform, DegenerateRangesGiveIdentity) {
  Rng rng(4);
  const auto t = sample_transform(rng, TransformRanges::identity());
  EXPECT_EQ(t.rotation(), Eigen::Matrix3d::Identity());
  EXPECT_EQ(t.translation(), Eigen::Vector3d::Zero());
  EXPECT_EQ(t.scale(), 1.0);
}

TEST(SampleTransform, SeededAndWithinRange) {
  Rng a(99), b(99);
  const auto ta = sample_transform(a, TransformRanges{}), tb = sample_transform(b, TransformRanges{});
  EXPECT_EQ(ta.rotation(), tb.rotation());
  EXPECT_EQ(ta.translation(), tb.translation());

  Rng rng(1);
  const TransformRanges ranges;
  double lo = 1e9, hi = -1e9;
  for (int i = 0; i < 10000; ++i) {
    const auto t = sample_transform(rng, ranges);
    const double yaw = std::atan2(t.rotation()(1, 0), t.rotation()(0, 0));
    lo = std::min(lo, yaw);
    hi = std::max(hi, yaw);
    ASSERT_GE(t.scale(), ranges.scale_min);
    ASSERT_LE(t.scale(), ranges.scale_max);
  }
  EXPECT_GE(lo, ranges.yaw_min - 1e-12);
  EXPECT_LE(hi, ranges.yaw_max + 1e-12);
  EXPECT_LT(lo, ranges.yaw_min + 0.01);
  EXPECT_GT(hi, ranges.yaw_max - 0.01);
}

TEST(Project, HandCases) {
  const auto cam = axis_camera();
  const Locations pts = (Locations(3, 3) << 0, 0, 5, 0, 0, -1, 1, 0, 5).finished();
  const auto p = project(pts, cam);
  EXPECT_DOUBLE_EQ(p.uv(0, 0), 600.0);
  EXPECT_DOUBLE_EQ(p.uv(0, 1), 180.0);
  EXPECT_DOUBLE_EQ(p.depth[0], 5.0);
  EXPECT_TRUE(p.valid[0]);
  EXPECT_FALSE(p.valid[1]);
  EXPECT_DOUBLE_EQ(p.uv(2, 0), 740.0);
}

TEST(FovFilter, AllValidAndAllInvalid) {
  const auto cam = axis_camera();
  const auto front = cloud_of({{0, 0, 2, 0}, {0, 0, 7, 0.5}, {0, 0, 40, 1}});
  ASSERT_TRUE(fov_filter(front, cam).has_value());
  EXPECT_EQ(fov_filter(front, cam)->size(), 3u);
  EXPECT_FALSE(fov_filter(cloud_of({{0, 0, -2, 0}, {1, 1, -7, 0}}), cam).has_value());
}

TEST(Bilinear, CenterMidpointAndClamp) {
  Rng rng(2);
  const auto map = diff::Var<double>::constant(verify::detail::random_tensor({2, 3, 4}, rng));
  SampleCoords c(3, 2);
  c << 2.0, 1.0, 1.5, 0.0, -3.0, 10.0;
  const auto s = bilinear_sample(map, c).value();
  for (std::size_t ch = 0; ch < 2; ++ch) {
    EXPECT_DOUBLE_EQ(s(0, ch), map.value()(ch, 1, 2));
    EXPECT_NEAR(s(1, ch), 0.5 * (map.value()(ch, 0, 1) + map.value()(ch, 0, 2)), 1e-15);
    EXPECT_DOUBLE_EQ(s(2, ch), map.value()(ch, 2, 0));
  }
}

TEST(GeometrySuite, Passes) {
  for (const auto& r : verify::geometry_suite(verify::Options{})) EXPECT_TRUE(r.passed) << r.name << " " << r.value;
}

TEST(KittiCalib, FixtureValuesAreExact) {
  const auto cam = parse_kitti_calib(fixture_text());
  EXPECT_EQ(cam.intrinsics(0, 0), 721.5377);
  EXPECT_EQ(cam.intrinsics(1, 1), 721.5377);
  EXPECT_EQ(cam.intrinsics(0, 2), 609.5593);
  EXPECT_EQ(cam.intrinsics(1, 2), 172.854);
  ASSERT_TRUE(cam.rectification.has_value());
  EXPECT_EQ((*cam.rectification)(0, 0), 0.9999239);
  EXPECT_EQ(cam.extrinsic_rotation(0, 1), -0.9999714);
}

TEST(KittiCalib, MatchesFullProjectionChain) {
  const auto cam = parse_kitti_calib(fixture_text());
  // P2 * R0_rect * Tr_velo_to_cam written out from the fixture rows.
  Eigen::Matrix<double, 3, 4> p2;
  p2 << 721.5377, 0, 609.5593, 44.85728, 0, 721.5377, 172.854, 0.2163791, 0, 0, 1, 0.002745884;
  Eigen::Matrix4d r0 = Eigen::Matrix4d::Identity();
  r0.topLeftCorner<3, 3>() << 0.9999239, 0.00983776, -0.007445048, -0.009869795, 0.9999421, -0.004278459, 0.007402527,
      0.004351614, 0.9999631;
  Eigen::Matrix4d tr = Eigen::Matrix4d::Identity();
  tr.topRows<3>() << 0.007533745, -0.9999714, -0.000616602, -0.004069766, 0.01480249, 0.0007280733, -0.9998902,
      -0.07631618, 0.9998621, 0.00752379, 0.01480755, -0.2717806;
  const Eigen::Matrix<double, 3, 4> chain = p2 * r0 * tr;
  Rng rng(8);
  Locations pts(200, 3);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) pts.row(i) << rng.uniform(5, 60), rng.uniform(-15, 15), rng.uniform(-2, 2);
  const auto proj = project(pts, cam);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const Eigen::Vector3d h = chain * Eigen::Vector4d(pts(i, 0), pts(i, 1), pts(i, 2), 1.0);
    EXPECT_NEAR(proj.uv(i, 0), h.x() / h.z(), 1e-6);
    EXPECT_NEAR(proj.uv(i, 1), h.y() / h.z(), 1e-6);
  }
}

TEST(KittiCalib, IdentityFixtureIsPurePinhole) {
  const std::string text =
      "P2: 700 0 600 0 0 700 180 0 0 0 1 0\n"
      "R0_rect: 1 0 0 0 1 0 0 0 1\n"
      "Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
  const auto cam = parse_kitti_calib(text);
  EXPECT_EQ(cam.extrinsic_rotation, Eigen::Matrix3d::Identity());
  EXPECT_EQ(cam.extrinsic_translation, Eigen::Vector3d::Zero());
  const auto p = project((Locations(1, 3) << 1, 0, 5).finished(), cam);
  EXPECT_DOUBLE_EQ(p.uv(0, 0), 740.0);
}

TEST(KittiCalib, TruncatedFileIsParseError) {
  std::string text = fixture_text();
  text = text.substr(0, text.find("Tr_velo_to_cam") + 40);
  EXPECT_THROW(parse_kitti_calib(text), ParseError);
  EXPECT_THROW(parse_kitti_calib("P2: 1 2 3\n"), ParseError);
}

TEST(PointBin, HandBuiltBytes) {
  const float vals[8] = {1, 2, 3, 0.5f, 4, 5, 6, 0.1f};
  std::string bytes(32, '\0');
  std::memcpy(bytes.data(), vals, 32);
  const auto load = load_point_bin(bytes);
  ASSERT_TRUE(load.cloud.has_value());
  EXPECT_EQ(load.cloud->size(), 2u);
  EXPECT_EQ(load.cloud->points()(1, 2), 6.0);
  EXPECT_EQ(load.cloud->points()(0, 3), 0.5);
  EXPECT_EQ(load.cloud->points()(1, 3), static_cast<double>(0.1f));
  EXPECT_FALSE(load_point_bin("").cloud.has_value());
  EXPECT_THROW(load_point_bin(std::string(17, '\0')), FormatError);
}

TEST(PointBin, RoundTripIsBitwiseStable) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Points p(1 + static_cast<Eigen::Index>(rng.below(50)), 4);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      p.row(i) << static_cast<float>(rng.uniform(-80, 80)), static_cast<float>(rng.uniform(-80, 80)),
          static_cast<float>(rng.uniform(-3, 3)), static_cast<float>(rng.uniform());
    }
    const std::string bytes = save_point_bin(PointCloud(p));
    const auto back = load_point_bin(bytes);
    ASSERT_TRUE(back.cloud.has_value());
    ASSERT_EQ(back.cloud->points(), p);
    ASSERT_EQ(save_point_bin(*back.cloud), bytes);
  }
}

TEST(Scene, SeedDeterminism) {
  const auto a = generate_scene(42, SceneConfig{}), b = generate_scene(42, SceneConfig{});
  EXPECT_EQ(a.cloud.points(), b.cloud.points());
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.depth_gt, b.depth_gt);
  const auto c = generate_scene(43, SceneConfig{});
  EXPECT_NE(a.cloud.points(), c.cloud.points());
}

TEST(Scene, PlaneOnlyPointsLieOnGround) {
  SceneConfig cfg;
  cfg.min_boxes = cfg.max_boxes = 0;
  const auto s = generate_scene(3, cfg);
  ASSERT_FALSE(s.cloud.empty());
  // noise is along the viewing ray, so bound the height error by the
  // ray's vertical share of 5 sigma
  for (Eigen::Index i = 0; i < s.cloud.points().rows(); ++i) {
    EXPECT_NEAR(s.cloud.points()(i, 2), -cfg.sensor_height, 5 * cfg.noise_sigma);
  }
}

TEST(Scene, ArchiveRoundTrip) {
  const fs::path root = fs::temp_directory_path() / "simipu_archive_rt";
  fs::remove_all(root);
  write_archive(root, 2, 77, SceneConfig{}, "digest");
  const auto scenes = read_archive(root);
  ASSERT_EQ(scenes.size(), 2u);
  const auto ref = generate_scene(78, SceneConfig{});
  EXPECT_EQ(scenes[1].seed, 78u);
  EXPECT_EQ(scenes[1].cloud.size(), ref.cloud.size());
  EXPECT_EQ(scenes[1].depth_gt.shape(), ref.depth_gt.shape());
  EXPECT_GE(projection_consistency(scenes[1].cloud, scenes[1].camera, scenes[1].depth_gt), 0.99);
  fs::remove_all(root);
}
