#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "simipu/diffcore.hpp"
#include "simipu/error.hpp"
#include "simipu/rng.hpp"

namespace simipu {

using Points = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Locations = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// n x c scene points: x, y, z in meters (LIDAR frame), then reflectance in
/// [0, 1] and any further channels.
class PointCloud {
 public:
  PointCloud() : points_(0, 4) {}

  explicit PointCloud(Points points) : points_(std::move(points)) { validate(); }

  std::size_t size() const { return static_cast<std::size_t>(points_.rows()); }
  std::size_t channels() const { return static_cast<std::size_t>(points_.cols()); }
  bool empty() const { return points_.rows() == 0; }
  bool has_reflectance() const { return points_.cols() >= 4; }

  const Points& points() const { return points_; }

  Locations locations() const { return points_.leftCols<3>(); }

  /// Rows in the given order (duplicates allowed).
  PointCloud select(const std::vector<std::size_t>& rows) const {
    Points out(static_cast<Eigen::Index>(rows.size()), points_.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points_.row(static_cast<Eigen::Index>(rows[i]));
    return PointCloud(std::move(out));
  }

 private:
  void validate() const {
    if (points_.cols() < 3) {
      throw DimensionError("point cloud needs at least 3 channels, got " + std::to_string(points_.cols()));
    }
    for (Eigen::Index r = 0; r < points_.rows(); ++r) {
      for (Eigen::Index c = 0; c < 3; ++c) {
        if (!std::isfinite(points_(r, c))) {
          throw NumericError("point cloud row " + std::to_string(r) + " has a non-finite coordinate");
        }
      }
      if (points_.cols() >= 4) {
        const double refl = points_(r, 3);
        if (!(refl >= 0.0 && refl <= 1.0)) {
          throw ConfigError("point cloud row " + std::to_string(r) + " reflectance " + std::to_string(refl) +
                            " outside [0, 1]");
        }
      }
    }
  }

  Points points_;
};

/// x -> scale * R * x + t with R a proper rotation and scale > 0.
///
/// Called "rigid" in the literature this follows, although the scale term
/// makes it a similarity.
class SimilarityTransform {
 public:
  SimilarityTransform() = default;

  SimilarityTransform(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation, double scale)
      : rotation_(rotation), translation_(translation), scale_(scale) {
    const double ortho = (rotation_.transpose() * rotation_ - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho < 1e-9) || !(rotation_.determinant() > 0.0)) {
      throw ConfigError("similarity transform: rotation is not a proper orthonormal matrix");
    }
    if (!(scale_ > 0.0) || !std::isfinite(scale_)) throw ConfigError("similarity transform: scale must be positive");
    if (!translation_.allFinite()) throw NumericError("similarity transform: non-finite translation");
  }

  static SimilarityTransform yaw(double angle, const Eigen::Vector3d& translation = Eigen::Vector3d::Zero(),
                                 double scale = 1.0) {
    return SimilarityTransform(Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()).toRotationMatrix(), translation,
                               scale);
  }

  const Eigen::Matrix3d& rotation() const { return rotation_; }
  const Eigen::Vector3d& translation() const { return translation_; }
  double scale() const { return scale_; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale_ * (rotation_ * p) + translation_; }

  Locations apply(const Locations& locations) const {
    Locations out(locations.rows(), 3);
    for (Eigen::Index i = 0; i < locations.rows(); ++i) out.row(i) = apply(Eigen::Vector3d(locations.row(i))).transpose();
    return out;
  }

  SimilarityTransform inverse() const {
    const Eigen::Matrix3d rt = rotation_.transpose();
    return SimilarityTransform(rt, -(rt * translation_) / scale_, 1.0 / scale_);
  }

 private:
  Eigen::Matrix3d rotation_ = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation_ = Eigen::Vector3d::Zero();
  double scale_ = 1.0;
};

/// Sampling box for random view transforms. Rotation is yaw only (about
/// the LIDAR z axis, which is gravity-aligned).
struct TransformRanges {
  double yaw_min = -std::numbers::pi / 4;
  double yaw_max = std::numbers::pi / 4;
  std::array<double, 3> translation_min{-0.5, -0.5, -0.5};
  std::array<double, 3> translation_max{0.5, 0.5, 0.5};
  double scale_min = 0.95;
  double scale_max = 1.05;

  void validate() const {
    auto check = [](double lo, double hi, const char* what) {
      if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
        throw ConfigError(std::string("transform range for ") + what + " is empty");
      }
    };
    check(yaw_min, yaw_max, "yaw");
    for (int a = 0; a < 3; ++a) check(translation_min[a], translation_max[a], "translation");
    check(scale_min, scale_max, "scale");
    if (!(scale_min > 0.0)) throw ConfigError("transform range for scale must be positive");
  }

  static TransformRanges identity() {
    TransformRanges r;
    r.yaw_min = r.yaw_max = 0.0;
    r.translation_min = r.translation_max = {0.0, 0.0, 0.0};
    r.scale_min = r.scale_max = 1.0;
    return r;
  }
};

inline SimilarityTransform sample_transform(Rng& rng, const TransformRanges& ranges) {
  ranges.validate();
  const double yaw = rng.uniform(ranges.yaw_min, ranges.yaw_max);
  Eigen::Vector3d t;
  for (int a = 0; a < 3; ++a) t[a] = rng.uniform(ranges.translation_min[a], ranges.translation_max[a]);
  const double s = rng.uniform(ranges.scale_min, ranges.scale_max);
  return SimilarityTransform::yaw(yaw, t, s);
}

/// Maps positions; reflectance and extra channels are copied, row order kept.
inline PointCloud apply_transform(const PointCloud& cloud, const SimilarityTransform& t) {
  Points out = cloud.points();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const Eigen::Vector3d p = t.apply(Eigen::Vector3d(out(i, 0), out(i, 1), out(i, 2)));
    out(i, 0) = p.x();
    out(i, 1) = p.y();
    out(i, 2) = p.z();
  }
  return PointCloud(std::move(out));
}

/// Pinhole camera with LIDAR-to-camera extrinsics.
///
/// Camera coordinates are x_cam = R_rect * (R_ext * x + t_ext) when a
/// rectification is present, R_ext * x + t_ext otherwise.
struct CameraModel {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d extrinsic_rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d extrinsic_translation = Eigen::Vector3d::Zero();
  int image_width = 0;
  int image_height = 0;
  std::optional<Eigen::Matrix3d> rectification;

  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }

  /// Extrinsic rotations read from calibration files are orthonormal only to
  /// the printed precision, hence the loose tolerance.
  void validate(double ortho_tol = 1e-4) const {
    if (!intrinsics.allFinite() || !extrinsic_rotation.allFinite() || !extrinsic_translation.allFinite()) {
      throw NumericError("camera model has non-finite entries");
    }
    if (intrinsics(1, 0) != 0.0 || intrinsics(2, 0) != 0.0 || intrinsics(2, 1) != 0.0 || intrinsics(2, 2) != 1.0) {
      throw ConfigError("camera intrinsics must be upper triangular with K[2][2] = 1");
    }
    if (!(fx() > 0.0) || !(fy() > 0.0)) throw ConfigError("camera focal lengths must be positive");
    if (image_width <= 0 || image_height <= 0) throw ConfigError("camera image size must be positive");
    if (!(cx() >= 0.0 && cx() < image_width && cy() >= 0.0 && cy() < image_height)) {
      throw ConfigError("camera principal point lies outside the image");
    }
    auto ortho = [&](const Eigen::Matrix3d& r) {
      return (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < ortho_tol;
    };
    if (!ortho(extrinsic_rotation)) throw ConfigError("camera extrinsic rotation is not orthonormal");
    if (rectification && !ortho(*rectification)) throw ConfigError("camera rectification is not orthonormal");
  }

  Eigen::Vector3d to_camera(const Eigen::Vector3d& lidar) const {
    Eigen::Vector3d cam = extrinsic_rotation * lidar + extrinsic_translation;
    if (rectification) cam = (*rectification) * cam;
    return cam;
  }
};

inline constexpr double kDefaultMinDepth = 0.1;

struct Projection {
  Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> uv;  ///< pixels (column, row)
  Eigen::VectorXd depth;                                          ///< camera z, meters
  std::vector<bool> valid;

  std::size_t valid_count() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true)); }
};

inline Projection project(const Locations& locations, const CameraModel& camera, double min_depth = kDefaultMinDepth) {
  camera.validate();
  const Eigen::Index m = locations.rows();
  Projection out;
  out.uv.resize(m, 2);
  out.depth.resize(m);
  out.valid.assign(static_cast<std::size_t>(m), false);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Vector3d cam = camera.to_camera(Eigen::Vector3d(locations.row(i)));
    const double z = cam.z();
    out.depth[i] = z;
    const Eigen::Vector3d pix = camera.intrinsics * cam;
    const double u = pix.x() / z, v = pix.y() / z;
    out.uv(i, 0) = u;
    out.uv(i, 1) = v;
    out.valid[static_cast<std::size_t>(i)] =
        z > min_depth && u >= 0.0 && u < camera.image_width && v >= 0.0 && v < camera.image_height;
  }
  return out;
}

/// Rows of `cloud` that project inside the image, in order; nullopt when
/// none do.
inline std::optional<PointCloud> fov_filter(const PointCloud& cloud, const CameraModel& camera,
                                            double min_depth = kDefaultMinDepth) {
  const Projection proj = project(cloud.locations(), camera, min_depth);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < proj.valid.size(); ++i)
    if (proj.valid[i]) keep.push_back(i);
  if (keep.empty()) return std::nullopt;
  return cloud.select(keep);
}

/// Continuous (column, row) positions in feature-map cells.
using SampleCoords = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// Bilinear read of feature_map[d x H x W] at m positions -> [m x d].
///
/// Cell (r, c) has its center at integer coordinates (c, r). Positions are
/// clamped to the map border. Differentiable in the map only; gradients
/// scatter with the forward blend weights.
template <class T>
diff::Var<T> bilinear_sample(const diff::Var<T>& feature_map, const SampleCoords& coords) {
  if (feature_map.value().rank() != 3 || feature_map.size() == 0) {
    throw DimensionError("bilinear_sample: feature map must be a non-empty d x H x W array, got " +
                         shape_string(feature_map.shape()));
  }
  const std::size_t d = feature_map.shape()[0], h = feature_map.shape()[1], w = feature_map.shape()[2];
  const std::size_t m = static_cast<std::size_t>(coords.rows());

  struct Tap {
    std::size_t x0, x1, y0, y1;
    T wx, wy;
  };
  std::vector<Tap> taps(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double cxr = coords(static_cast<Eigen::Index>(i), 0), cyr = coords(static_cast<Eigen::Index>(i), 1);
    if (!std::isfinite(cxr) || !std::isfinite(cyr)) throw NumericError("bilinear_sample: non-finite coordinate at row " + std::to_string(i));
    const double x = std::clamp(cxr, 0.0, static_cast<double>(w - 1));
    const double y = std::clamp(cyr, 0.0, static_cast<double>(h - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(x));
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    taps[i] = {x0, std::min(x0 + 1, w - 1), y0, std::min(y0 + 1, h - 1), static_cast<T>(x - static_cast<double>(x0)),
               static_cast<T>(y - static_cast<double>(y0))};
  }

  Tensor<T> out(Shape{m, d});
  const auto& f = feature_map.value();
  for (std::size_t i = 0; i < m; ++i) {
    const Tap& t = taps[i];
    const T w00 = (T(1) - t.wx) * (T(1) - t.wy), w01 = t.wx * (T(1) - t.wy);
    const T w10 = (T(1) - t.wx) * t.wy, w11 = t.wx * t.wy;
    for (std::size_t c = 0; c < d; ++c) {
      out(i, c) = w00 * f(c, t.y0, t.x0) + w01 * f(c, t.y0, t.x1) + w10 * f(c, t.y1, t.x0) + w11 * f(c, t.y1, t.x1);
    }
  }
  return diff::make_op<T>("bilinear_sample", std::move(out), {feature_map}, [taps = std::move(taps), d](diff::Node<T>& n) {
    auto& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const Tap& t = taps[i];
      const T w00 = (T(1) - t.wx) * (T(1) - t.wy), w01 = t.wx * (T(1) - t.wy);
      const T w10 = (T(1) - t.wx) * t.wy, w11 = t.wx * t.wy;
      for (std::size_t c = 0; c < d; ++c) {
        const T up = n.grad(i, c);
        g(c, t.y0, t.x0) += w00 * up;
        g(c, t.y0, t.x1) += w01 * up;
        g(c, t.y1, t.x0) += w10 * up;
        g(c, t.y1, t.x1) += w11 * up;
      }
    }
  });
}

}  // namespace simipu
