#pragma once

#include <Eigen/Core>
#include <Eigen/LU>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "simipu/error.hpp"
#include "simipu/geometry.hpp"
#include "simipu/rng.hpp"
#include "simipu/tensor.hpp"

namespace simipu {

// ---------------------------------------------------------------------------
// Synthetic paired scenes

struct SceneConfig {
  int image_width = 384;
  int image_height = 128;
  double fx = 200.0;
  double fy = 200.0;
  double cx = 192.0;
  double cy = 60.0;
  std::size_t points = 1024;
  std::size_t min_boxes = 2;
  std::size_t max_boxes = 6;
  double noise_sigma = 0.02;     ///< meters, along the viewing ray
  double sensor_height = 1.73;   ///< LIDAR origin above the ground plane
  double ground_range = 40.0;    ///< ground plane extends this far forward
  double ground_half_width = 30.0;
  double box_min_distance = 8.0;
  double box_max_distance = 30.0;
  bool noise_images = false;     ///< negative control: image carries no geometry

  void validate() const {
    if (image_width <= 0 || image_height <= 0) throw ConfigError("scene image size must be positive");
    if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("scene focal lengths must be positive");
    if (min_boxes > max_boxes) throw ConfigError("scene box count range is empty");
    if (!(noise_sigma >= 0.0)) throw ConfigError("scene noise must be non-negative");
    if (!(box_min_distance <= box_max_distance)) throw ConfigError("scene box distance range is empty");
    if (!(sensor_height > 0.0 && ground_range > 0.0 && ground_half_width > 0.0)) {
      throw ConfigError("scene ground extents must be positive");
    }
  }
};

/// KITTI-like rig: LIDAR x forward, y left, z up; camera looks along +x.
inline CameraModel scene_camera(const SceneConfig& config) {
  CameraModel cam;
  cam.intrinsics << config.fx, 0.0, config.cx, 0.0, config.fy, config.cy, 0.0, 0.0, 1.0;
  cam.extrinsic_rotation << 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0;
  cam.extrinsic_translation = Eigen::Vector3d(0.0, -0.08, -0.27);
  cam.image_width = config.image_width;
  cam.image_height = config.image_height;
  return cam;
}

struct Box3 {
  Eigen::Vector3d lo;
  Eigen::Vector3d hi;
  Eigen::Vector3d albedo;
};

struct SyntheticScene {
  PointCloud cloud;
  Tensor<double> image;     ///< 3 x H x W in [0, 1]
  Tensor<double> depth_gt;  ///< H x W camera depth in meters, 0 = no surface
  CameraModel camera;
  std::uint64_t seed = 0;
  std::vector<Box3> boxes;
};

namespace detail {

struct Hit {
  double t = std::numeric_limits<double>::infinity();  ///< camera depth
  Eigen::Vector3d albedo = Eigen::Vector3d::Zero();
  double shade = 1.0;
  bool valid = false;
};

inline double luminance(const Eigen::Vector3d& rgb) { return 0.299 * rgb.x() + 0.587 * rgb.y() + 0.114 * rgb.z(); }

inline Eigen::Vector3d ground_albedo(const Eigen::Vector3d& p) {
  const auto tx = static_cast<long>(std::floor(p.x() / 2.0));
  const auto ty = static_cast<long>(std::floor(p.y() / 2.0));
  const double a = ((tx + ty) % 2 == 0) ? 0.3 : 0.6;
  return {a, a, 0.9 * a};
}

/// Nearest surface along origin + t * dir, t > 0. `dir` is scaled so that
/// t equals the camera depth.
inline Hit cast_ray(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir, const std::vector<Box3>& boxes,
                    const SceneConfig& config) {
  Hit hit;
  if (dir.z() < 0.0) {
    const double t = (-config.sensor_height - origin.z()) / dir.z();
    const Eigen::Vector3d p = origin + t * dir;
    if (t > 0.0 && p.x() >= 0.0 && p.x() <= config.ground_range && std::abs(p.y()) <= config.ground_half_width) {
      hit.t = t;
      hit.albedo = ground_albedo(p);
      hit.shade = 1.0;
      hit.valid = true;
    }
  }
  for (const auto& box : boxes) {
    double t_near = -std::numeric_limits<double>::infinity(), t_far = std::numeric_limits<double>::infinity();
    int axis = -1;
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (dir[a] == 0.0) {
        if (origin[a] < box.lo[a] || origin[a] > box.hi[a]) miss = true;
        continue;
      }
      double t0 = (box.lo[a] - origin[a]) / dir[a];
      double t1 = (box.hi[a] - origin[a]) / dir[a];
      if (t0 > t1) std::swap(t0, t1);
      if (t0 > t_near) {
        t_near = t0;
        axis = a;
      }
      t_far = std::min(t_far, t1);
      if (t_near > t_far) miss = true;
    }
    if (miss || axis < 0 || t_near <= 0.0 || t_near >= hit.t) continue;
    hit.t = t_near;
    hit.albedo = box.albedo;
    hit.shade = axis == 2 ? 1.0 : (axis == 0 ? 0.85 : 0.7);
    hit.valid = true;
  }
  return hit;
}

}  // namespace detail

/// Ground plane plus axis-aligned boxes, rendered by per-pixel nearest
/// surface. Every cloud point is sampled on the ray through a distinct pixel
/// center, so it projects back onto a pixel whose depth it shares up to the
/// range noise. Fully determined by (seed, config).
inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  Rng rng(seed);
  SyntheticScene scene;
  scene.seed = seed;
  scene.camera = scene_camera(config);
  const auto& cam = scene.camera;

  const std::size_t box_count = config.min_boxes + static_cast<std::size_t>(rng.below(config.max_boxes - config.min_boxes + 1));
  const double lateral = 0.6 * config.cx / config.fx;
  for (std::size_t b = 0; b < box_count; ++b) {
    const double x = rng.uniform(config.box_min_distance, config.box_max_distance);
    const double y = rng.uniform(-lateral * x, lateral * x);
    const double len = rng.uniform(1.5, 4.5), wid = rng.uniform(1.5, 2.5), hgt = rng.uniform(1.0, 2.5);
    Box3 box;
    box.lo = {x - len / 2, y - wid / 2, -config.sensor_height};
    box.hi = {x + len / 2, y + wid / 2, -config.sensor_height + hgt};
    box.albedo = {rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95)};
    scene.boxes.push_back(box);
  }

  const auto w = static_cast<std::size_t>(config.image_width), h = static_cast<std::size_t>(config.image_height);
  const Eigen::Matrix3d rt = cam.extrinsic_rotation.transpose();
  const Eigen::Vector3d origin = -(rt * cam.extrinsic_translation);
  const Eigen::Matrix3d k_inv = cam.intrinsics.inverse();
  const Eigen::Vector3d sky(0.6, 0.75, 0.95);

  scene.image = Tensor<double>(Shape{3, h, w});
  scene.depth_gt = Tensor<double>(Shape{h, w});
  std::vector<std::size_t> hit_pixels;
  std::vector<double> reflectance(w * h, 0.0);
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t col = 0; col < w; ++col) {
      const Eigen::Vector3d dir = rt * (k_inv * Eigen::Vector3d(static_cast<double>(col), static_cast<double>(row), 1.0));
      const detail::Hit hit = detail::cast_ray(origin, dir, scene.boxes, config);
      Eigen::Vector3d rgb = sky;
      if (hit.valid) {
        scene.depth_gt(row, col) = hit.t;
        rgb = hit.albedo * hit.shade / (1.0 + hit.t / 30.0);
        hit_pixels.push_back(row * w + col);
        reflectance[row * w + col] = detail::luminance(hit.albedo);
      }
      for (int c = 0; c < 3; ++c) scene.image(static_cast<std::size_t>(c), row, col) = rgb[c];
    }
  }
  if (hit_pixels.size() < config.points) {
    throw ConfigError("scene generation: only " + std::to_string(hit_pixels.size()) +
                      " pixels see a surface, fewer than the " + std::to_string(config.points) + " requested points");
  }
  for (std::size_t i = 0; i < config.points; ++i) {
    std::swap(hit_pixels[i], hit_pixels[i + static_cast<std::size_t>(rng.below(hit_pixels.size() - i))]);
  }
  hit_pixels.resize(config.points);
  std::sort(hit_pixels.begin(), hit_pixels.end());

  Points pts(static_cast<Eigen::Index>(config.points), 4);
  for (std::size_t i = 0; i < hit_pixels.size(); ++i) {
    const std::size_t row = hit_pixels[i] / w, col = hit_pixels[i] % w;
    const Eigen::Vector3d dir = rt * (k_inv * Eigen::Vector3d(static_cast<double>(col), static_cast<double>(row), 1.0));
    const Eigen::Vector3d p = origin + scene.depth_gt(row, col) * dir + config.noise_sigma * rng.normal() * dir.normalized();
    pts.row(static_cast<Eigen::Index>(i)) << p.x(), p.y(), p.z(), reflectance[hit_pixels[i]];
  }
  scene.cloud = PointCloud(std::move(pts));

  if (config.noise_images) {
    Rng noise = rng.split();
    for (auto& v : scene.image.data()) v = noise.uniform();
  }
  return scene;
}

/// Fraction of points whose depth matches depth_gt at the rounded projected
/// pixel within `tolerance` meters. Points projecting outside the image or
/// onto a pixel without surface count as mismatches.
inline double projection_consistency(const PointCloud& cloud, const CameraModel& camera, const Tensor<double>& depth_gt,
                                     double tolerance = 0.1) {
  if (cloud.empty()) return 1.0;
  const Projection proj = project(cloud.locations(), camera);
  const auto h = static_cast<long>(depth_gt.dim(0)), w = static_cast<long>(depth_gt.dim(1));
  std::size_t good = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!proj.valid[i]) continue;
    const long col = std::lround(proj.uv(static_cast<Eigen::Index>(i), 0));
    const long row = std::lround(proj.uv(static_cast<Eigen::Index>(i), 1));
    if (col < 0 || row < 0 || col >= w || row >= h) continue;
    const double gt = depth_gt(static_cast<std::size_t>(row), static_cast<std::size_t>(col));
    if (gt > 0.0 && std::abs(gt - proj.depth[static_cast<Eigen::Index>(i)]) <= tolerance) ++good;
  }
  return static_cast<double>(good) / static_cast<double>(cloud.size());
}

// ---------------------------------------------------------------------------
// KITTI calibration text

namespace detail {

inline std::vector<double> parse_floats(std::string_view text, std::size_t line_no, std::string_view key) {
  std::vector<double> out;
  const char* p = text.data();
  const char* end = text.data() + text.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    if (p == end) break;
    double v = 0.0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc()) {
      throw ParseError("calibration line " + std::to_string(line_no) + " (" + std::string(key) + "): malformed number");
    }
    out.push_back(v);
    p = next;
  }
  return out;
}

}  // namespace detail

/// Reads P2, R0_rect and Tr_velo_to_cam. The full KITTI chain
/// P2 * R0_rect * Tr_velo_to_cam is preserved: intrinsics are P2's left
/// 3x3, the P2 translation column is folded into the extrinsic translation
/// (pre-rectification, hence the R0^T), and R0_rect is kept as the
/// rectification.
inline CameraModel parse_kitti_calib(std::string_view text, int image_width = 1242, int image_height = 375) {
  std::map<std::string, std::vector<double>, std::less<>> values;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  const std::map<std::string, std::size_t, std::less<>> expected{{"P2", 12}, {"R0_rect", 9}, {"Tr_velo_to_cam", 12}};
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::size_t colon = line.find(':');
    if (colon == std::string_view::npos) continue;
    std::string_view key = line.substr(0, colon);
    while (!key.empty() && (key.front() == ' ' || key.front() == '\t')) key.remove_prefix(1);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.remove_suffix(1);
    const auto want = expected.find(key);
    if (want == expected.end()) continue;
    auto nums = detail::parse_floats(line.substr(colon + 1), line_no, key);
    if (nums.size() != want->second) {
      throw ParseError("calibration line " + std::to_string(line_no) + ": " + std::string(key) + " has " +
                       std::to_string(nums.size()) + " values, expected " + std::to_string(want->second));
    }
    values[std::string(key)] = std::move(nums);
  }
  for (const auto& [key, count] : expected) {
    if (!values.count(key)) throw ParseError("calibration is missing key " + key);
  }
  const auto& p2 = values["P2"];
  const auto& r0 = values["R0_rect"];
  const auto& tr = values["Tr_velo_to_cam"];

  CameraModel cam;
  cam.intrinsics << p2[0], p2[1], p2[2], p2[4], p2[5], p2[6], p2[8], p2[9], p2[10];
  const Eigen::Vector3d p2_offset(p2[3], p2[7], p2[11]);
  Eigen::Matrix3d rect;
  rect << r0[0], r0[1], r0[2], r0[3], r0[4], r0[5], r0[6], r0[7], r0[8];
  cam.extrinsic_rotation << tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10];
  const Eigen::Vector3d tr_t(tr[3], tr[7], tr[11]);
  cam.extrinsic_translation = tr_t + rect.transpose() * (cam.intrinsics.inverse() * p2_offset);
  cam.rectification = rect;
  cam.image_width = image_width;
  cam.image_height = image_height;
  cam.validate();
  return cam;
}

/// Inverse of parse_kitti_calib for cameras with no P2 offset.
inline std::string format_kitti_calib(const CameraModel& cam) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(12);
  auto row = [&](const char* key, std::initializer_list<double> vals) {
    os << key << ':';
    for (double v : vals) os << ' ' << v;
    os << '\n';
  };
  const auto& k = cam.intrinsics;
  row("P2", {k(0, 0), k(0, 1), k(0, 2), 0.0, k(1, 0), k(1, 1), k(1, 2), 0.0, k(2, 0), k(2, 1), k(2, 2), 0.0});
  const Eigen::Matrix3d r0 = cam.rectification.value_or(Eigen::Matrix3d::Identity());
  row("R0_rect", {r0(0, 0), r0(0, 1), r0(0, 2), r0(1, 0), r0(1, 1), r0(1, 2), r0(2, 0), r0(2, 1), r0(2, 2)});
  const auto& r = cam.extrinsic_rotation;
  const auto& t = cam.extrinsic_translation;
  row("Tr_velo_to_cam", {r(0, 0), r(0, 1), r(0, 2), t.x(), r(1, 0), r(1, 1), r(1, 2), t.y(), r(2, 0), r(2, 1), r(2, 2), t.z()});
  return os.str();
}

// ---------------------------------------------------------------------------
// Little-endian float32 helpers

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

inline void put_f32(std::string& out, float f) {
  const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
  char b[4];
  std::memcpy(b, &bits, 4);
  out.append(b, 4);
}

inline float get_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  return std::bit_cast<float>(to_le(bits));
}

}  // namespace detail

/// x, y, z, reflectance as consecutive little-endian float32 per point.
inline std::string save_point_bin(const PointCloud& cloud) {
  if (cloud.channels() != 4) throw DimensionError("point binary format stores exactly 4 channels");
  std::string out;
  out.reserve(cloud.size() * 16);
  for (Eigen::Index r = 0; r < cloud.points().rows(); ++r)
    for (Eigen::Index c = 0; c < 4; ++c) detail::put_f32(out, static_cast<float>(cloud.points()(r, c)));
  return out;
}

struct PointBinLoad {
  std::optional<PointCloud> cloud;  ///< nullopt when no rows remain
  std::size_t dropped_rows = 0;     ///< rows with a non-finite value
};

inline PointBinLoad load_point_bin(std::string_view bytes) {
  if (bytes.size() % 16 != 0) {
    throw FormatError("point binary length " + std::to_string(bytes.size()) + " is not a multiple of 16");
  }
  const std::size_t n = bytes.size() / 16;
  std::vector<std::array<double, 4>> rows;
  rows.reserve(n);
  PointBinLoad out;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 4> row;
    bool finite = true;
    for (int c = 0; c < 4; ++c) {
      row[static_cast<std::size_t>(c)] = detail::get_f32(bytes.data() + i * 16 + static_cast<std::size_t>(c) * 4);
      finite = finite && std::isfinite(row[static_cast<std::size_t>(c)]);
    }
    if (!finite) {
      ++out.dropped_rows;
      continue;
    }
    if (row[3] < 0.0 || row[3] > 1.0) throw FormatError("point " + std::to_string(i) + " reflectance outside [0, 1]");
    rows.push_back(row);
  }
  if (rows.empty()) return out;
  Points pts(static_cast<Eigen::Index>(rows.size()), 4);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < 4; ++c) pts(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
  out.cloud = PointCloud(std::move(pts));
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

/// Binary P6, 8 bits per channel.
inline std::string encode_ppm(const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("PPM needs a 3 x H x W image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * w * h);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(image(ch, r, c), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  return out;
}

inline Tensor<double> decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P6") throw FormatError("image is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError("PPM header is malformed");
  }
  if (maxval != 255) throw FormatError("only 8-bit PPM is supported");
  ++pos;
  if (bytes.size() < pos + 3 * w * h) throw FormatError("PPM pixel data is truncated");
  Tensor<double> image(Shape{3, h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        image(ch, r, c) = static_cast<unsigned char>(bytes[pos + (r * w + c) * 3 + ch]) / 255.0;
  return image;
}

inline std::string encode_depth(const Tensor<double>& depth) {
  std::string out;
  out.reserve(depth.size() * 4);
  for (double v : depth.data()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline Tensor<double> decode_depth(std::string_view bytes, std::size_t h, std::size_t w) {
  if (bytes.size() != h * w * 4) throw FormatError("depth map has " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(h * w * 4));
  Tensor<double> depth(Shape{h, w});
  for (std::size_t i = 0; i < h * w; ++i) depth[i] = detail::get_f32(bytes.data() + i * 4);
  return depth;
}

/// One scene directory: image.ppm, cloud.bin, calib.txt, depth.f32, meta.
inline void write_scene(const std::filesystem::path& dir, const SyntheticScene& scene, const std::string& config_digest) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "image.ppm", encode_ppm(scene.image));
  write_file(dir / "cloud.bin", save_point_bin(scene.cloud));
  write_file(dir / "calib.txt", format_kitti_calib(scene.camera));
  write_file(dir / "depth.f32", encode_depth(scene.depth_gt));
  nlohmann::ordered_json meta;
  meta["seed"] = scene.seed;
  meta["config_digest"] = config_digest;
  meta["image_width"] = scene.camera.image_width;
  meta["image_height"] = scene.camera.image_height;
  meta["points"] = scene.cloud.size();
  write_file(dir / "meta", meta.dump(2) + "\n");
}

inline SyntheticScene read_scene(const std::filesystem::path& dir) {
  SyntheticScene scene;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / "meta"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("scene meta in " + dir.string() + " is not valid JSON: " + e.what());
  }
  scene.seed = meta.value("seed", std::uint64_t{0});
  scene.image = decode_ppm(read_file(dir / "image.ppm"));
  const std::size_t h = scene.image.dim(1), w = scene.image.dim(2);
  scene.camera = parse_kitti_calib(read_file(dir / "calib.txt"), static_cast<int>(w), static_cast<int>(h));
  auto load = load_point_bin(read_file(dir / "cloud.bin"));
  if (load.cloud) scene.cloud = std::move(*load.cloud);
  scene.depth_gt = decode_depth(read_file(dir / "depth.f32"), h, w);
  return scene;
}

inline std::string scene_dir_name(std::size_t index) {
  std::ostringstream os;
  os << "scene_" << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

/// Writes `count` scenes with seeds base_seed, base_seed + 1, ... and a
/// manifest.json listing them.
inline void write_archive(const std::filesystem::path& root, std::size_t count, std::uint64_t base_seed,
                          const SceneConfig& config, const std::string& config_digest) {
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  nlohmann::ordered_json manifest;
  manifest["config_digest"] = config_digest;
  manifest["base_seed"] = base_seed;
  manifest["scenes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = base_seed + i;
    write_scene(root / scene_dir_name(i), generate_scene(seed, config), config_digest);
    manifest["scenes"].push_back({{"dir", scene_dir_name(i)}, {"seed", seed}});
  }
  write_file(root / "manifest.json", manifest.dump(2) + "\n");
}

inline std::vector<SyntheticScene> read_archive(const std::filesystem::path& root) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(root / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("archive manifest is not valid JSON: " + std::string(e.what()));
  }
  std::vector<SyntheticScene> scenes;
  for (const auto& entry : manifest.at("scenes")) scenes.push_back(read_scene(root / entry.at("dir").get<std::string>()));
  return scenes;
}

}  // namespace simipu
