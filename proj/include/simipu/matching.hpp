#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "simipu/encoders.hpp"
#include "simipu/error.hpp"
#include "simipu/geometry.hpp"
#include "simipu/rng.hpp"

namespace simipu {

using CostMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexPair = std::pair<std::size_t, std::size_t>;

enum class MatchKind { kIntra, kInter };
enum class AssignAlgorithm { kHungarian, kGreedy };

/// One-to-one correspondences between query rows and key rows, sorted by
/// query index.
struct MatchSet {
  std::vector<IndexPair> pairs;
  std::vector<double> costs;  ///< per pair; empty when there is no natural cost
  MatchKind kind = MatchKind::kIntra;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  double total_cost() const {
    double s = 0.0;
    for (double c : costs) s += c;
    return s;
  }
};

struct Assignment {
  std::vector<IndexPair> pairs;  ///< sorted by row
  double total = 0.0;
};

namespace detail {

inline void check_costs(const CostMatrix& cost) {
  for (Eigen::Index r = 0; r < cost.rows(); ++r)
    for (Eigen::Index c = 0; c < cost.cols(); ++c) {
      const double v = cost(r, c);
      if (!std::isfinite(v)) {
        throw NumericError("assignment: non-finite cost at (" + std::to_string(r) + ", " + std::to_string(c) + ")");
      }
      if (v < 0.0) {
        throw ConfigError("assignment: negative cost at (" + std::to_string(r) + ", " + std::to_string(c) + ")");
      }
    }
}

inline Assignment finish(const CostMatrix& cost, std::vector<IndexPair> pairs) {
  std::sort(pairs.begin(), pairs.end());
  Assignment a;
  for (const auto& [r, c] : pairs) a.total += cost(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  a.pairs = std::move(pairs);
  return a;
}

}  // namespace detail

/// Minimum-cost rectangular assignment of min(r, s) pairs.
///
/// The matrix is padded with zero rows/columns to n x n, n = max(r, s), and
/// solved by shortest augmenting paths with row/column potentials, O(n^3).
/// Among equal-cost optima the lexicographically smallest row->column
/// vector is returned: every optimum is a perfect matching on the edges the
/// final potentials make tight, and a row-by-row pass re-routes to the
/// smallest tight column along alternating cycles.
inline Assignment hungarian(const CostMatrix& cost) {
  detail::check_costs(cost);
  const auto r = static_cast<std::size_t>(cost.rows());
  const auto s = static_cast<std::size_t>(cost.cols());
  if (r == 0 || s == 0) return {};
  const std::size_t n = std::max(r, s);
  auto c_at = [&](std::size_t i, std::size_t j) {
    return (i < r && j < s) ? cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) : 0.0;
  };

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  std::vector<double> minv(n + 1);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c_at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> col_of(n), row_of(n);
  for (std::size_t j = 1; j <= n; ++j) {
    row_of[j - 1] = owner[j] - 1;
    col_of[owner[j] - 1] = j - 1;
  }

  // Lexicographic refinement on the tight subgraph.
  double scale = 1.0;
  for (Eigen::Index a = 0; a < cost.size(); ++a) scale = std::max(scale, cost.data()[a]);
  const double eps = 1e-12 * scale * static_cast<double>(n);
  auto tight = [&](std::size_t i, std::size_t j) { return c_at(i, j) - u[i + 1] - v[j + 1] <= eps; };
  std::vector<std::size_t> parent_row(n), via_col(n);
  std::vector<char> seen(n);
  std::vector<std::size_t> queue;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < col_of[i]; ++j) {
      const std::size_t p = row_of[j];
      if (p < i || !tight(i, j)) continue;
      // Re-home row p so that column col_of[i] is the one left over.
      const std::size_t target = col_of[i];
      std::fill(seen.begin(), seen.end(), 0);
      queue.assign(1, p);
      seen[p] = 1;
      seen[i] = 1;
      std::size_t end_row = n;
      for (std::size_t q = 0; q < queue.size() && end_row == n; ++q) {
        const std::size_t x = queue[q];
        for (std::size_t y = 0; y < n; ++y) {
          if (y == j || !tight(x, y)) continue;
          if (y == target) {
            end_row = x;
            via_col[x] = y;
            break;
          }
          const std::size_t z = row_of[y];
          if (z < i || seen[z]) continue;
          seen[z] = 1;
          parent_row[z] = x;
          via_col[z] = y;
          queue.push_back(z);
        }
      }
      if (end_row == n) continue;
      // Walk back: each row on the path takes the column that led onward.
      std::size_t x = end_row;
      std::size_t take = target;
      while (true) {
        const std::size_t old = col_of[x];
        col_of[x] = take;
        row_of[take] = x;
        if (x == p) break;
        take = old;
        x = parent_row[x];
      }
      col_of[i] = j;
      row_of[j] = i;
      break;
    }
  }

  std::vector<IndexPair> pairs;
  pairs.reserve(std::min(r, s));
  for (std::size_t i = 0; i < r; ++i)
    if (col_of[i] < s) pairs.emplace_back(i, col_of[i]);
  return detail::finish(cost, std::move(pairs));
}

/// Repeatedly take the globally cheapest remaining cell and strike its row
/// and column. Ties go to the smaller (row, column).
inline Assignment greedy_assign(const CostMatrix& cost) {
  detail::check_costs(cost);
  const auto r = static_cast<std::size_t>(cost.rows());
  const auto s = static_cast<std::size_t>(cost.cols());
  std::vector<std::size_t> cells(r * s);
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  const double* data = cost.data();
  std::sort(cells.begin(), cells.end(), [&](std::size_t a, std::size_t b) {
    return data[a] < data[b] || (data[a] == data[b] && a < b);
  });
  std::vector<char> row_used(r, 0), col_used(s, 0);
  std::vector<IndexPair> pairs;
  const std::size_t want = std::min(r, s);
  for (std::size_t cell : cells) {
    if (pairs.size() == want) break;
    const std::size_t i = cell / s, j = cell % s;
    if (row_used[i] || col_used[j]) continue;
    row_used[i] = col_used[j] = 1;
    pairs.emplace_back(i, j);
  }
  return detail::finish(cost, std::move(pairs));
}

inline Assignment assign(const CostMatrix& cost, AssignAlgorithm algorithm) {
  return algorithm == AssignAlgorithm::kHungarian ? hungarian(cost) : greedy_assign(cost);
}

inline CostMatrix intra_cost_matrix(const Locations& a, const Locations& b, const SimilarityTransform& t) {
  const Locations ta = t.apply(a);
  CostMatrix cost(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) cost(i, j) = (ta.row(i) - b.row(j)).norm();
  return cost;
}

/// Positive pairs between two views' downsampled points. Cost is the
/// distance between T(view-a location) and the view-b location; above the
/// cap only the lowest-cost pairs survive.
inline MatchSet build_intra_matches(const Locations& a, const Locations& b, const SimilarityTransform& t,
                                    AssignAlgorithm algorithm, std::size_t cap) {
  if (a.rows() == 0 || b.rows() == 0) throw ConfigError("build_intra_matches: both point sets must be non-empty");
  const CostMatrix cost = intra_cost_matrix(a, b, t);
  Assignment asg = assign(cost, algorithm);
  std::vector<std::pair<double, IndexPair>> scored;
  scored.reserve(asg.pairs.size());
  for (const auto& p : asg.pairs) scored.emplace_back(cost(static_cast<Eigen::Index>(p.first), static_cast<Eigen::Index>(p.second)), p);
  if (scored.size() > cap) {
    std::stable_sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    scored.resize(cap);
    std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) { return x.second < y.second; });
  }
  MatchSet m;
  m.kind = MatchKind::kIntra;
  for (const auto& [c, p] : scored) {
    m.pairs.push_back(p);
    m.costs.push_back(c);
  }
  return m;
}

template <class T>
MatchSet build_intra_matches(const SampledSet<T>& a, const SampledSet<T>& b, const SimilarityTransform& t,
                             AssignAlgorithm algorithm, std::size_t cap) {
  return build_intra_matches(a.locations, b.locations, t, algorithm, cap);
}

template <class T>
struct InterMatches {
  MatchSet matches;          ///< (point row, sampled row)
  diff::Var<T> sampled;      ///< f_gamma, one row per pair
  SampleCoords coords;       ///< feature-map coordinates that were sampled
};

/// Feature-map coordinates of projected points: pixels / stride.
inline SampleCoords feature_coords(const Projection& proj, const std::vector<std::size_t>& rows, std::size_t stride) {
  SampleCoords coords(static_cast<Eigen::Index>(rows.size()), 2);
  const double inv = 1.0 / static_cast<double>(stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    coords(static_cast<Eigen::Index>(i), 0) = proj.uv(static_cast<Eigen::Index>(rows[i]), 0) * inv;
    coords(static_cast<Eigen::Index>(i), 1) = proj.uv(static_cast<Eigen::Index>(rows[i]), 1) * inv;
  }
  return coords;
}

/// Point/image positive pairs by projection. Points that do not project
/// into the image are dropped; above the cap a seeded random subset is
/// kept. nullopt when no point projects.
template <class T>
std::optional<InterMatches<T>> build_inter_matches(const Locations& points, const CameraModel& camera,
                                                   const ImageFeatureMap<T>& feature_map, std::size_t cap, Rng& rng,
                                                   double min_depth = kDefaultMinDepth) {
  if (points.rows() == 0) throw ConfigError("build_inter_matches: no points");
  const Projection proj = project(points, camera, min_depth);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < proj.valid.size(); ++i)
    if (proj.valid[i]) rows.push_back(i);
  if (rows.empty()) return std::nullopt;
  if (rows.size() > cap) {
    for (std::size_t i = 0; i < cap; ++i) std::swap(rows[i], rows[i + static_cast<std::size_t>(rng.below(rows.size() - i))]);
    rows.resize(cap);
    std::sort(rows.begin(), rows.end());
  }
  InterMatches<T> out;
  out.coords = feature_coords(proj, rows, feature_map.stride);
  out.sampled = bilinear_sample(feature_map.features, out.coords);
  out.matches.kind = MatchKind::kInter;
  for (std::size_t i = 0; i < rows.size(); ++i) out.matches.pairs.emplace_back(rows[i], i);
  return out;
}

}  // namespace simipu
