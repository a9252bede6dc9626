#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "simipu/diffcore.hpp"
#include "simipu/error.hpp"
#include "simipu/geometry.hpp"
#include "simipu/rng.hpp"

namespace simipu {

/// Downsampled points: positions (data, never differentiated) and their
/// features.
template <class T>
struct SampledSet {
  Locations locations;
  diff::Var<T> features;  ///< m x d
  std::vector<std::size_t> source_indices;  ///< rows of the input each center came from

  std::size_t size() const { return static_cast<std::size_t>(locations.rows()); }
};

namespace detail {

inline void check_fps_args(std::size_t n, std::size_t k, std::size_t start) {
  if (k == 0 || k > n) {
    throw ConfigError("farthest point sampling: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  if (start >= n) throw ConfigError("farthest point sampling: start index " + std::to_string(start) + " out of range");
}

/// Greedy farthest-point recurrence over an arbitrary squared metric.
/// `min_dist` holds each point's squared distance to the already-picked
/// set (+inf if none); `picked` marks points that may not be chosen.
template <class Dist2>
void fps_continue(std::size_t n, std::size_t count, std::size_t first, Dist2&& dist2, std::vector<double>& min_dist,
                  std::vector<char>& picked, std::vector<std::size_t>& out) {
  std::size_t current = first;
  for (std::size_t step = 0; step < count; ++step) {
    out.push_back(current);
    picked[current] = 1;
    if (step + 1 == count) break;
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (picked[j]) continue;
      const double d = dist2(current, j);
      if (d < min_dist[j]) min_dist[j] = d;
      // strict '>' keeps the lowest index on ties
      if (min_dist[j] > best_dist) {
        best_dist = min_dist[j];
        best = j;
      }
    }
    current = best;
  }
}

inline double row_dist2(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = a[c] - b[c];
    s += diff * diff;
  }
  return s;
}

}  // namespace detail

/// Farthest-point sampling in Euclidean position space (D-FPS). The first
/// pick is `start`; ties go to the lowest index.
inline std::vector<std::size_t> d_fps(const Locations& locations, std::size_t k, std::size_t start = 0) {
  const auto n = static_cast<std::size_t>(locations.rows());
  detail::check_fps_args(n, k, start);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> picked(n, 0);
  std::vector<std::size_t> out;
  out.reserve(k);
  const double* base = locations.data();
  detail::fps_continue(
      n, k, start, [&](std::size_t a, std::size_t b) { return detail::row_dist2(base + 3 * a, base + 3 * b, 3); },
      min_dist, picked, out);
  return out;
}

/// Feature-space farthest-point sampling (F-FPS) on row-major features
/// [n x d].
inline std::vector<std::size_t> f_fps(std::span<const double> features, std::size_t dim, std::size_t k,
                                      std::size_t start = 0) {
  if (dim == 0 || features.size() % dim != 0) throw DimensionError("f_fps: feature buffer does not split into rows");
  const std::size_t n = features.size() / dim;
  detail::check_fps_args(n, k, start);
  for (double v : features)
    if (!std::isfinite(v)) throw NumericError("f_fps: non-finite feature");
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> picked(n, 0);
  std::vector<std::size_t> out;
  out.reserve(k);
  const double* base = features.data();
  detail::fps_continue(
      n, k, start, [&](std::size_t a, std::size_t b) { return detail::row_dist2(base + dim * a, base + dim * b, dim); },
      min_dist, picked, out);
  return out;
}

/// Half the picks by D-FPS from `start`, the other half by F-FPS among the
/// points D-FPS left behind. The F-FPS half continues the farthest-point
/// recurrence with distances measured to everything already picked, so the
/// two halves never overlap.
inline std::vector<std::size_t> fused_sample(const Locations& locations, std::span<const double> features,
                                             std::size_t dim, std::size_t k, std::size_t start = 0) {
  if (k % 2 != 0) throw ConfigError("fused_sample: k must be even, got " + std::to_string(k));
  const auto n = static_cast<std::size_t>(locations.rows());
  if (dim == 0 || features.size() != n * dim) throw DimensionError("fused_sample: features do not match locations");
  detail::check_fps_args(n, k, start);
  const std::size_t half = k / 2;
  std::vector<std::size_t> out = d_fps(locations, half, start);

  std::vector<char> picked(n, 0);
  for (std::size_t i : out) picked[i] = 1;
  const double* fb = features.data();
  auto fdist = [&](std::size_t a, std::size_t b) { return detail::row_dist2(fb + dim * a, fb + dim * b, dim); };
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t first = n;
  double best = -1.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (picked[j]) continue;
    for (std::size_t i : out) min_dist[j] = std::min(min_dist[j], fdist(i, j));
    if (min_dist[j] > best) {
      best = min_dist[j];
      first = j;
    }
  }
  detail::fps_continue(n, half, first, fdist, min_dist, picked, out);
  return out;
}

struct NeighborGroup {
  std::size_t center_index = 0;
  std::vector<std::size_t> member_indices;  ///< center first
  Locations relative_offsets;               ///< member - center, meters
};

/// Up to `max_neighbors` points within `radius` of each center (inclusive).
/// The center is always the first member; when more candidates qualify, a
/// seeded random subset of the others is kept, in ascending index order.
inline std::vector<NeighborGroup> ball_group(const Locations& locations, const std::vector<std::size_t>& centers,
                                             double radius, std::size_t max_neighbors, Rng& rng) {
  if (!(radius > 0.0)) throw ConfigError("ball_group: radius must be positive");
  if (max_neighbors == 0) throw ConfigError("ball_group: max_neighbors must be at least 1");
  const auto n = static_cast<std::size_t>(locations.rows());
  const double r2 = radius * radius;
  std::vector<NeighborGroup> groups;
  groups.reserve(centers.size());
  std::vector<std::size_t> candidates;
  for (std::size_t center : centers) {
    if (center >= n) throw DimensionError("ball_group: center index out of range");
    const Eigen::Vector3d c = locations.row(static_cast<Eigen::Index>(center));
    candidates.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == center) continue;
      if ((Eigen::Vector3d(locations.row(static_cast<Eigen::Index>(j))) - c).squaredNorm() <= r2) candidates.push_back(j);
    }
    const std::size_t room = max_neighbors - 1;
    if (candidates.size() > room) {
      for (std::size_t i = 0; i < room; ++i) {
        const std::size_t pick = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
        std::swap(candidates[i], candidates[pick]);
      }
      candidates.resize(room);
      std::sort(candidates.begin(), candidates.end());
    }
    NeighborGroup g;
    g.center_index = center;
    g.member_indices.reserve(candidates.size() + 1);
    g.member_indices.push_back(center);
    g.member_indices.insert(g.member_indices.end(), candidates.begin(), candidates.end());
    g.relative_offsets.resize(static_cast<Eigen::Index>(g.member_indices.size()), 3);
    for (std::size_t i = 0; i < g.member_indices.size(); ++i) {
      g.relative_offsets.row(static_cast<Eigen::Index>(i)) =
          locations.row(static_cast<Eigen::Index>(g.member_indices[i])) - c.transpose();
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

/// Shared per-point layer: y = x * weight + bias, weight [in x out].
template <class T>
struct Linear {
  diff::Var<T> weight;
  diff::Var<T> bias;

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
};

template <class T>
diff::Var<T> apply_linear(const Linear<T>& layer, const diff::Var<T>& x) {
  return diff::add_bias(diff::matmul(x, layer.weight), layer.bias);
}

enum class CenterSampler { kDistance, kFused };

struct SetAbstractionSpec {
  std::size_t centers = 0;
  double radius = 0.0;
  std::size_t max_neighbors = 16;
  CenterSampler sampler = CenterSampler::kFused;
  std::size_t start_index = 0;
};

/// One set-abstraction block: pick centers, group their ball neighborhoods,
/// run the shared MLP on [offset / radius | member feature], max-pool per
/// group. Groups smaller than max_neighbors are padded by repeating the
/// center row, which leaves the max unchanged.
template <class T>
SampledSet<T> set_abstraction(const Locations& locations, const diff::Var<T>& features,
                              const std::vector<Linear<T>>& mlp, const SetAbstractionSpec& spec, Rng& rng) {
  const auto n = static_cast<std::size_t>(locations.rows());
  if (features.value().rank() != 2 || features.shape()[0] != n) {
    throw DimensionError("set_abstraction: features " + shape_string(features.shape()) + " do not match " +
                         std::to_string(n) + " locations");
  }
  const std::size_t d_in = features.shape()[1];
  if (mlp.empty() || mlp.front().in_features() != 3 + d_in) {
    throw DimensionError("set_abstraction: first MLP layer expects " +
                         (mlp.empty() ? std::string("nothing") : std::to_string(mlp.front().in_features())) +
                         " inputs, grouping produces " + std::to_string(3 + d_in));
  }
  for (std::size_t l = 1; l < mlp.size(); ++l) {
    if (mlp[l].in_features() != mlp[l - 1].out_features()) throw DimensionError("set_abstraction: MLP widths do not chain");
  }

  std::vector<std::size_t> centers;
  if (spec.sampler == CenterSampler::kFused && d_in > 0) {
    const Tensor<double> fv = features.value().template cast<double>();
    centers = fused_sample(locations, fv.data(), d_in, spec.centers, spec.start_index);
  } else {
    centers = d_fps(locations, spec.centers, spec.start_index);
  }
  const auto groups = ball_group(locations, centers, spec.radius, spec.max_neighbors, rng);

  const std::size_t k = spec.max_neighbors;
  const std::size_t rows = groups.size() * k;
  Tensor<T> offsets(Shape{rows, 3});
  std::vector<std::size_t> member_rows(rows);
  const double inv_r = 1.0 / spec.radius;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    for (std::size_t slot = 0; slot < k; ++slot) {
      const std::size_t m = slot < grp.member_indices.size() ? slot : 0;
      member_rows[g * k + slot] = grp.member_indices[m];
      for (int a = 0; a < 3; ++a) offsets(g * k + slot, a) = static_cast<T>(grp.relative_offsets(static_cast<Eigen::Index>(m), a) * inv_r);
    }
  }
  diff::Var<T> x = diff::Var<T>::constant(std::move(offsets));
  if (d_in > 0) x = diff::concat_cols(x, diff::gather_rows(features, std::span<const std::size_t>(member_rows)));
  for (const auto& layer : mlp) x = diff::relu(apply_linear(layer, x));

  SampledSet<T> out;
  out.features = diff::segment_max(x, k);
  out.locations.resize(static_cast<Eigen::Index>(centers.size()), 3);
  for (std::size_t i = 0; i < centers.size(); ++i) out.locations.row(static_cast<Eigen::Index>(i)) = locations.row(static_cast<Eigen::Index>(centers[i]));
  out.source_indices = std::move(centers);
  return out;
}

}  // namespace simipu
