#pragma once

// Oracle suites shared by `simipu verify` and the acceptance binary. Each
// check compares library output against an independent computation:
// central finite differences, exhaustive assignment, per-point rechecks or
// closed forms. Everything runs in double precision.

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "simipu/dataio.hpp"
#include "simipu/diffcore.hpp"
#include "simipu/encoders.hpp"
#include "simipu/geometry.hpp"
#include "simipu/losses.hpp"
#include "simipu/matching.hpp"
#include "simipu/sampling.hpp"

namespace simipu::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      ///< worst observed error or measured quantity
  double threshold = 0.0;  ///< pass limit for `value`
  std::size_t cases = 0;
  std::string detail;
};

inline nlohmann::ordered_json to_json(const CheckResult& r) {
  nlohmann::ordered_json j;
  j["name"] = r.name;
  j["passed"] = r.passed;
  j["value"] = r.value;
  j["threshold"] = r.threshold;
  j["cases"] = r.cases;
  if (!r.detail.empty()) j["detail"] = r.detail;
  return j;
}

struct Options {
  std::size_t cases = 100;        ///< seeded cases per gradient check
  std::size_t matching_cases = 1000;
  std::size_t dominance_cases = 1000;
  std::uint64_t seed = 0;
  /// Swap relu for a variant whose backward is wrong; the gradcheck suite
  /// must then fail.
  bool inject_fault = false;
};

namespace detail {

using V = diff::Var<double>;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values nudged at least `gap` away from zero so relu-like kinks are not
/// straddled by the finite-difference stencil.
inline Tensor<double> kink_free_tensor(Shape shape, Rng& rng, double gap = 1e-2) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) {
    v = rng.uniform(gap, 1.0);
    if (rng.uniform() < 0.5) v = -v;
  }
  return t;
}

/// relu whose backward lets negative inputs through: the mutation the
/// gradcheck suite must catch.
inline V mutated_relu(const V& a) {
  Tensor<double> out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return diff::make_op<double>("mutated_relu", std::move(out), {a}, [](diff::Node<double>& n) { n.inputs[0]->accumulate(n.grad); });
}

/// Seeded gradient check repeated over `cases` inputs. `make` builds, for
/// a case rng, the input tensor and the scalar function of it.
using CaseFactory = std::function<std::pair<Tensor<double>, std::function<V(const V&)>>(Rng&)>;

/// Central differences for piecewise-smooth composites (relu, max pooling,
/// neighbor grouping). A coordinate that fails at h = 1e-5 is re-measured
/// at 1e-6 and 1e-7; a kink inside the wider stencil disappears at a
/// smaller step, while a wrong backward fails at every step.
inline diff::GradCheckReport piecewise_grad_check(const std::function<V(const V&)>& f, const Tensor<double>& x, double tol,
                                                  std::size_t* remeasured = nullptr) {
  auto param = V::parameter(x);
  diff::backward(f(param));
  const Tensor<double> analytic = param.grad();
  diff::GradCheckReport report;
  report.errors.resize(x.size());
  Tensor<double> probe = x;
  auto error_at = [&](std::size_t i, double h) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double fp = f(V::constant(probe)).value()[0];
    probe[i] = saved - h;
    const double fm = f(V::constant(probe)).value()[0];
    probe[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite difference at coordinate " + std::to_string(i));
    return std::abs(analytic[i] - numeric) / std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    double err = error_at(i, 1e-5);
    for (double h : {1e-6, 1e-7}) {
      if (err < tol) break;
      if (remeasured) ++*remeasured;
      err = std::min(err, error_at(i, h));
    }
    report.errors[i] = err;
    if (err > report.max_error) {
      report.max_error = err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_error < tol;
  return report;
}

inline CheckResult repeated_grad_check(const std::string& name, const CaseFactory& make, std::size_t cases, std::uint64_t seed,
                                       double tol, bool piecewise = false) {
  CheckResult r{name, true, 0.0, tol, cases, {}};
  std::size_t remeasured = 0;
  for (std::size_t c = 0; c < cases; ++c) {
    Rng rng(seed * 1000003ULL + c);
    auto [x, f] = make(rng);
    const auto rep = piecewise ? piecewise_grad_check(f, x, tol, &remeasured) : diff::grad_check(f, x, 1e-5, tol);
    if (rep.max_error > r.value) {
      r.value = rep.max_error;
      if (!rep.passed) r.detail = "case " + std::to_string(c) + " coordinate " + std::to_string(rep.worst_index);
    }
    r.passed = r.passed && rep.passed;
  }
  if (remeasured > 0 && r.detail.empty()) r.detail = std::to_string(remeasured) + " coordinate(s) re-measured at a smaller step";
  return r;
}

/// sum(op(x) * R) with a fixed random R, so every output coordinate
/// carries a distinct weight.
inline std::function<V(const V&)> weighted(std::function<V(const V&)> op, const Tensor<double>& weights) {
  return [op = std::move(op), weights](const V& x) {
    auto y = op(x);
    return diff::sum(diff::mul(y, V::constant(weights.reshaped(y.shape()))));
  };
}

inline Tensor<double> weights_for(const Shape& shape, Rng& rng) { return random_tensor(shape, rng, 0.5, 1.5); }

/// Output shape of op applied to x (cheap forward pass).
inline Shape out_shape(const std::function<V(const V&)>& op, const Tensor<double>& x) { return op(V::constant(x)).shape(); }

inline CaseFactory unary_case(Shape shape, std::function<V(const V&)> op, bool kink_free = false, double lo = -1.0, double hi = 1.0) {
  return [shape, op, kink_free, lo, hi](Rng& rng) {
    Tensor<double> x = kink_free ? kink_free_tensor(shape, rng) : random_tensor(shape, rng, lo, hi);
    auto w = weights_for(out_shape(op, x), rng);
    return std::make_pair(std::move(x), weighted(op, w));
  };
}

/// Gradient w.r.t. the first operand of a binary op, with the second
/// operand random but fixed.
inline CaseFactory binary_case(Shape a, Shape b, std::function<V(const V&, const V&)> op, bool second = false) {
  return [a, b, op, second](Rng& rng) {
    Tensor<double> x = random_tensor(second ? b : a, rng);
    const Tensor<double> other = random_tensor(second ? a : b, rng);
    std::function<V(const V&)> f = [op, other, second](const V& v) {
      return second ? op(V::constant(other), v) : op(v, V::constant(other));
    };
    auto w = weights_for(out_shape(f, x), rng);
    return std::make_pair(std::move(x), weighted(f, w));
  };
}

}  // namespace detail

/// Finite-difference checks for every primitive (tol 1e-5) and for the
/// composite objectives (tol 1e-4).
inline std::vector<CheckResult> gradcheck_suite(const Options& opt) {
  using namespace detail;
  using diff::Var;
  std::vector<CheckResult> out;
  const std::size_t n = opt.cases;
  const double prim = 1e-5, composite = 1e-4;
  auto relu_op = [&opt](const V& x) { return opt.inject_fault ? mutated_relu(x) : diff::relu(x); };

  auto add = [&](const std::string& name, const CaseFactory& make, double tol) {
    out.push_back(repeated_grad_check(name, make, n, opt.seed, tol, tol > prim));
  };

  add("matmul.a", binary_case({4, 3}, {3, 5}, [](const V& a, const V& b) { return diff::matmul(a, b); }), prim);
  add("matmul.b", binary_case({4, 3}, {3, 5}, [](const V& a, const V& b) { return diff::matmul(a, b); }, true), prim);
  add("matmul_nt.a", binary_case({4, 3}, {5, 3}, [](const V& a, const V& b) { return diff::matmul_nt(a, b); }), prim);
  add("matmul_nt.b", binary_case({4, 3}, {5, 3}, [](const V& a, const V& b) { return diff::matmul_nt(a, b); }, true), prim);
  add("add", binary_case({3, 4}, {3, 4}, [](const V& a, const V& b) { return diff::add(a, b); }), prim);
  add("sub.b", binary_case({3, 4}, {3, 4}, [](const V& a, const V& b) { return diff::sub(a, b); }, true), prim);
  add("mul", binary_case({3, 4}, {3, 4}, [](const V& a, const V& b) { return diff::mul(a, b); }), prim);
  add("scale", unary_case({3, 4}, [](const V& x) { return diff::scale(x, 2.5); }), prim);
  add("relu", unary_case({5, 4}, relu_op, true), prim);
  add("square", unary_case({3, 4}, [](const V& x) { return diff::square(x); }), prim);
  add("sqrt", unary_case({3, 4}, [](const V& x) { return diff::sqrt(x); }, false, 0.5, 2.0), prim);
  add("sum", unary_case({3, 4}, [](const V& x) { return diff::scale(diff::sum(x), 1.5); }), prim);
  add("mean", unary_case({3, 4}, [](const V& x) { return diff::scale(diff::mean(x), 1.5); }), prim);
  add("add_bias.bias", binary_case({4, 3}, {3}, [](const V& x, const V& b) { return diff::add_bias(x, b); }, true), prim);
  add("gather_rows", unary_case({5, 3}, [](const V& x) {
        static const std::size_t idx[] = {4, 0, 2, 0, 3};
        return diff::gather_rows(x, std::span<const std::size_t>(idx));
      }), prim);
  add("concat_cols.b", binary_case({4, 2}, {4, 3}, [](const V& a, const V& b) { return diff::concat_cols(a, b); }, true), prim);
  add("segment_max", unary_case({12, 3}, [](const V& x) { return diff::segment_max(x, 4); }), prim);
  add("l2_normalize", unary_case({4, 5}, [](const V& x) { return diff::l2_normalize(x, 1e-12); }), prim);
  add("softmax_cross_entropy", unary_case({4, 6}, [](const V& x) {
        static const std::size_t tgt[] = {0, 5, 2, 2};
        return diff::softmax_cross_entropy(x, std::span<const std::size_t>(tgt));
      }), prim);
  add("stop_gradient", unary_case({3, 4}, [](const V& x) { return diff::add(x, diff::scale(diff::stop_gradient(x), 0.0)); }), prim);

  add("conv2d.x", binary_case({2, 6, 7}, {3, 2, 3, 3}, [](const V& x, const V& k) { return diff::conv2d(x, k, 1, 1); }), prim);
  add("conv2d.kernel", binary_case({2, 6, 7}, {3, 2, 3, 3}, [](const V& x, const V& k) { return diff::conv2d(x, k, 1, 1); }, true), prim);
  add("conv2d.strided", binary_case({2, 7, 7}, {2, 2, 3, 3}, [](const V& x, const V& k) { return diff::conv2d(x, k, 2, 0); }, true), prim);
  add("avg_pool2d", unary_case({2, 4, 6}, [](const V& x) { return diff::avg_pool2d(x, 2); }), prim);
  add("channel_norm.x", unary_case({3, 4, 5}, [](const V& x) {
        auto stats = diff::NormStats<double>::identity(3);
        const V gamma = V::constant(Tensor<double>(Shape{3}, std::vector<double>{1.5, 0.7, 1.1}));
        const V beta = V::constant(Tensor<double>(Shape{3}, std::vector<double>{0.1, -0.2, 0.3}));
        return diff::channel_norm(x, gamma, beta, stats, diff::NormMode::kBatch);
      }), prim);
  add("channel_norm.gamma", [](Rng& rng) {
        const Tensor<double> x = random_tensor({3, 4, 5}, rng);
        std::function<V(const V&)> f = [x](const V& g) {
          auto stats = diff::NormStats<double>::identity(3);
          return diff::channel_norm(V::constant(x), g, V::constant(Tensor<double>(Shape{3})), stats, diff::NormMode::kBatch);
        };
        Tensor<double> g = random_tensor({3}, rng, 0.5, 1.5);
        auto w = weights_for(out_shape(f, g), rng);
        return std::make_pair(std::move(g), weighted(f, w));
      }, prim);
  add("bilinear_sample", [](Rng& rng) {
        SampleCoords coords(6, 2);
        for (Eigen::Index i = 0; i < 6; ++i) coords.row(i) << rng.uniform(-0.5, 5.5), rng.uniform(-0.5, 3.5);
        std::function<V(const V&)> f = [coords](const V& m) { return bilinear_sample(m, coords); };
        Tensor<double> map = random_tensor({3, 4, 5}, rng);
        auto w = weights_for(out_shape(f, map), rng);
        return std::make_pair(std::move(map), weighted(f, w));
      }, prim);

  // Composites.
  add("mlp_info_nce", [relu_op](Rng& rng) {
        const Tensor<double> q_in = random_tensor({6, 5}, rng), k_in = random_tensor({6, 5}, rng);
        const Tensor<double> w2 = random_tensor({8, 4}, rng);
        MatchSet m;
        for (std::size_t i = 0; i < 6; ++i) m.pairs.emplace_back(i, (i + 2) % 6);
        std::function<V(const V&)> f = [=](const V& w1) {
          // the ones column keeps every row away from zero norm
          const auto ones = V::constant(Tensor<double>(Shape{6, 1}, 1.0));
          auto embed = [&](const Tensor<double>& in) {
            const auto h = diff::matmul(relu_op(diff::matmul(V::constant(in), w1)), V::constant(w2));
            return diff::l2_normalize(diff::concat_cols(h, ones), 1e-12);
          };
          return info_nce(embed(q_in), embed(k_in), m, InfoNceOptions{});
        };
        return std::make_pair(random_tensor({5, 8}, rng), f);
      }, composite);
  add("set_abstraction.weights", [](Rng& rng) {
        Locations loc(24, 3);
        for (Eigen::Index i = 0; i < 24; ++i) loc.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);
        const Tensor<double> feats = random_tensor({24, 2}, rng);
        const Tensor<double> w2 = random_tensor({6, 6}, rng);
        const std::uint64_t group_seed = rng.next_u64();
        std::function<V(const V&)> f = [=](const V& w1) {
          std::vector<Linear<double>> mlp{{w1, V::constant(Tensor<double>(Shape{6}))}, {V::constant(w2), V::constant(Tensor<double>(Shape{6}))}};
          SetAbstractionSpec spec;
          spec.centers = 8;
          spec.radius = 0.8;
          spec.max_neighbors = 6;
          spec.sampler = CenterSampler::kDistance;
          Rng g(group_seed);
          return diff::sum(set_abstraction(loc, V::constant(feats), mlp, spec, g).features);
        };
        return std::make_pair(random_tensor({5, 6}, rng), f);
      }, composite);
  add("project_head", [](Rng& rng) {
        const Tensor<double> x = random_tensor({5, 4}, rng);
        const Tensor<double> w2 = random_tensor({4, 3}, rng), b2 = random_tensor({3}, rng);
        const Tensor<double> r = weights_for({5, 3}, rng);
        std::function<V(const V&)> f = [=](const V& w1) {
          HeadParams<double> head{{w1, V::constant(Tensor<double>(Shape{4}))}, {V::constant(w2), V::constant(b2)}};
          return diff::sum(diff::mul(project_head(V::constant(x), head, true), V::constant(r)));
        };
        return std::make_pair(random_tensor({4, 4}, rng), f);
      }, composite);
  add("encode_image.two_stage", [](Rng& rng) {
        EncoderConfig ec;
        ec.image_channels = {3, 4};
        ec.convs_per_stage = 1;
        Rng init(rng.next_u64());
        auto params = init_params<double>(ec, init);
        const Tensor<double> image = random_tensor({3, 8, 10}, rng, 0.0, 1.0);
        const Tensor<double> other = params.image_backbone[1][0].kernel.value();
        std::function<V(const V&)> f = [=](const V& k0) mutable {
          params.image_backbone[0][0].kernel = k0;
          params.image_backbone[1][0].kernel = V::constant(other);
          auto fm = encode_image(V::constant(image), params, ec);
          return diff::scale(diff::sum(diff::square(fm.features)), 0.1);
        };
        Tensor<double> k0 = params.image_backbone[0][0].kernel.value();
        return std::make_pair(std::move(k0), f);
      }, composite);
  add("si_loss", [](Rng& rng) {
        std::vector<double> depth(10);
        std::vector<bool> valid(10, true);
        for (auto& d : depth) d = rng.uniform(2.0, 40.0);
        valid[3] = false;
        std::function<V(const V&)> f = [=](const V& p) { return si_loss(p, std::span<const double>(depth), valid, SiLossParams{}); };
        return std::make_pair(random_tensor({10}, rng, 0.5, 4.0), f);
      }, composite);

  // End-to-end L_total on a miniature model, w.r.t. a point-branch and an
  // image-branch tensor.
  struct Mini {
    EncoderConfig ec;
    PointCloud cloud;
    Tensor<double> image;
    CameraModel cam;
    SimilarityTransform t;
    std::uint64_t rng_seed;
    EncoderParams<double> params;
    /// Point embeddings the inter term sees. The inter loss passes no
    /// gradient to the point branch, so its oracle holds them fixed.
    std::optional<Tensor<double>> frozen_alpha;
  };
  auto make_mini = [](Rng& rng) {
    Mini m;
    // one distance-sampled stage: fused sampling selects by feature, which
    // makes the loss jump under perturbation
    m.ec.point_stages = {{16, 6, 0.9, 6}};
    m.ec.mlp_layers_per_stage = 1;
    m.ec.image_channels = {4, 6};
    m.ec.convs_per_stage = 1;
    m.ec.embedding_dim = 5;
    Points pts(32, 4);
    for (Eigen::Index i = 0; i < 32; ++i) pts.row(i) << rng.uniform(4.0, 8.0), rng.uniform(-1.5, 1.5), rng.uniform(-0.8, 0.8), rng.uniform();
    m.cloud = PointCloud(pts);
    m.image = random_tensor({3, 8, 12}, rng, 0.0, 1.0);
    m.cam.intrinsics << 4.0, 0.0, 6.0, 0.0, 4.0, 4.0, 0.0, 0.0, 1.0;
    m.cam.extrinsic_rotation << 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0;
    m.cam.extrinsic_translation.setZero();
    m.cam.image_width = 12;
    m.cam.image_height = 8;
    m.t = sample_transform(rng, TransformRanges{});
    m.rng_seed = rng.next_u64();
    Rng init(rng.next_u64());
    m.params = init_params<double>(m.ec, init);
    // nonzero output biases keep dead-relu rows off the origin
    for (auto* head : {&m.params.point_head, &m.params.image_head}) {
      head->output.bias = diff::Var<double>::parameter(random_tensor(head->output.bias.shape(), rng, 0.2, 0.6));
    }
    return m;
  };
  auto mini_loss = [](Mini& m) {
    Rng rng(m.rng_seed);
    const auto a = encode_points(m.cloud, m.params, m.ec, rng, StartPolicy::kZero);
    const auto b = encode_points(apply_transform(m.cloud, m.t), m.params, m.ec, rng, StartPolicy::kZero);
    const auto ea = project_head(a.features, m.params.point_head);
    const auto eb = project_head(b.features, m.params.point_head);
    const MatchSet m1 = build_intra_matches(a, b, m.t, AssignAlgorithm::kHungarian, 4096);
    const auto fm = encode_image(V::constant(m.image), m.params, m.ec);
    auto inter = build_inter_matches(a.locations, m.cam, fm, 4096, rng);
    if (!inter || inter->matches.size() < 2) throw ConfigError("mini scene has too few inter matches");
    const auto eg = project_head(inter->sampled, m.params.image_head);
    if (!m.frozen_alpha) m.frozen_alpha = ea.value();
    const auto alpha_for_inter = V::constant(*m.frozen_alpha);
    return total_loss(intra_loss(ea, eb, m1, InfoNceOptions{}), inter_loss(alpha_for_inter, eg, inter->matches, InfoNceOptions{}),
                      LossWeights{});
  };
  add("total_loss.point_stage1", [=](Rng& rng) {
        auto mini = std::make_shared<Mini>(make_mini(rng));
        std::function<V(const V&)> f = [mini, mini_loss](const V& w) {
          mini->params.point_backbone[0][0].weight = w;
          return mini_loss(*mini);
        };
        Tensor<double> w = mini->params.point_backbone[0][0].weight.value();
        return std::make_pair(std::move(w), f);
      }, composite);
  add("total_loss.image_stage1", [=](Rng& rng) {
        auto mini = std::make_shared<Mini>(make_mini(rng));
        std::function<V(const V&)> f = [mini, mini_loss](const V& k) {
          mini->params.image_backbone[0][0].kernel = k;
          return mini_loss(*mini);
        };
        Tensor<double> k = mini->params.image_backbone[0][0].kernel.value();
        return std::make_pair(std::move(k), f);
      }, composite);

  // A broken backward must be visible to the oracle.
  {
    Rng rng(opt.seed + 17);
    const Tensor<double> x = kink_free_tensor({5, 4}, rng);
    const auto w = weights_for({5, 4}, rng);
    const auto rep = diff::grad_check(weighted(mutated_relu, w), x, 1e-5, 1e-5);
    out.push_back({"mutation.relu_detected", !rep.passed && rep.max_error > 1e-1, rep.max_error, 1e-1, 1,
                   "wrong relu backward must fail with error > 0.1"});
  }
  return out;
}

/// Optimal cost by enumerating every injective map of the smaller side.
inline double brute_force_assignment(const CostMatrix& cost) {
  const bool flip = cost.rows() > cost.cols();
  const CostMatrix c = flip ? CostMatrix(cost.transpose()) : cost;
  const auto r = static_cast<std::size_t>(c.rows()), s = static_cast<std::size_t>(c.cols());
  std::vector<std::size_t> perm(s);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) total += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline CostMatrix random_cost(std::size_t r, std::size_t s, Rng& rng) {
  CostMatrix c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s));
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j) c(i, j) = rng.uniform(0.0, 10.0);
  return c;
}

/// Exact transformed permutations: matching must recover the permutation.
inline CheckResult zero_cost_recovery_check(std::size_t cases, std::uint64_t seed) {
  CheckResult r{"zero_cost_recovery", true, 0.0, 1e-9, cases, {}};
  for (std::size_t c = 0; c < cases; ++c) {
    Rng rng(seed * 7919ULL + c);
    const std::size_t m = 32;
    Locations a(static_cast<Eigen::Index>(m), 3);
    for (Eigen::Index i = 0; i < a.rows(); ++i) a.row(i) << rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-2, 2);
    const SimilarityTransform t = sample_transform(rng, TransformRanges{});
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = m - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.below(i + 1))]);
    const Locations ta = t.apply(a);
    Locations b(static_cast<Eigen::Index>(m), 3);
    for (std::size_t i = 0; i < m; ++i) b.row(static_cast<Eigen::Index>(perm[i])) = ta.row(static_cast<Eigen::Index>(i));
    const MatchSet ms = build_intra_matches(a, b, t, AssignAlgorithm::kHungarian, 4096);
    bool ok = ms.size() == m;
    for (const auto& [i, j] : ms.pairs) ok = ok && perm[i] == j;
    r.value = std::max(r.value, ms.total_cost());
    if (!ok || !(ms.total_cost() < r.threshold)) {
      r.passed = false;
      if (r.detail.empty()) r.detail = "case " + std::to_string(c) + " did not recover the permutation";
    }
  }
  return r;
}

inline std::vector<CheckResult> matching_suite(const Options& opt) {
  std::vector<CheckResult> out;
  {
    CheckResult r{"hungarian_vs_brute_force.5x5", true, 0.0, 1e-9, 100, {}};
    for (std::size_t c = 0; c < 100; ++c) {
      Rng rng(opt.seed * 31ULL + c);
      const CostMatrix cost = random_cost(5, 5, rng);
      const double gap = std::abs(hungarian(cost).total - brute_force_assignment(cost));
      r.value = std::max(r.value, gap);
      if (!(gap < r.threshold)) r.passed = false;
    }
    out.push_back(r);
  }
  {
    CheckResult r{"hungarian_vs_brute_force.rect_le_8", true, 0.0, 1e-9, opt.matching_cases, {}};
    for (std::size_t c = 0; c < opt.matching_cases; ++c) {
      Rng rng(opt.seed * 131ULL + c + 1000000ULL);
      const std::size_t rows = 1 + static_cast<std::size_t>(rng.below(8)), cols = 1 + static_cast<std::size_t>(rng.below(8));
      const CostMatrix cost = random_cost(rows, cols, rng);
      const Assignment a = hungarian(cost);
      const double gap = std::abs(a.total - brute_force_assignment(cost));
      r.value = std::max(r.value, gap);
      if (!(gap < r.threshold) || a.pairs.size() != std::min(rows, cols)) {
        r.passed = false;
        if (r.detail.empty()) r.detail = "case " + std::to_string(c) + " (" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
      }
    }
    out.push_back(r);
  }
  {
    CheckResult r{"hungarian_le_greedy.32x32", true, 0.0, 0.0, opt.dominance_cases, {}};
    for (std::size_t c = 0; c < opt.dominance_cases; ++c) {
      Rng rng(opt.seed * 977ULL + c + 2000000ULL);
      const CostMatrix cost = random_cost(32, 32, rng);
      const double excess = hungarian(cost).total - greedy_assign(cost).total;
      r.value = std::max(r.value, excess);
      if (excess > 1e-9) r.passed = false;
    }
    r.detail = "value = max(hungarian - greedy)";
    out.push_back(r);
  }
  {
    const CostMatrix cost = (CostMatrix(2, 2) << 1, 2, 1, 10).finished();
    const auto h = hungarian(cost), g = greedy_assign(cost);
    const bool ok = h.total == 3.0 && g.total == 11.0 && h.pairs == std::vector<IndexPair>{{0, 1}, {1, 0}} &&
                    g.pairs == std::vector<IndexPair>{{0, 0}, {1, 1}};
    out.push_back({"hand_case.2x2", ok, h.total, 3.0, 1, "hungarian 3 via (0,1),(1,0); greedy 11"});
  }
  out.push_back(zero_cost_recovery_check(100, opt.seed));
  return out;
}

inline std::vector<CheckResult> geometry_suite(const Options& opt) {
  std::vector<CheckResult> out;
  {
    CheckResult r{"transform_round_trip", true, 0.0, 1e-9, 1000, {}};
    for (std::size_t c = 0; c < 1000; ++c) {
      Rng rng(opt.seed * 53ULL + c);
      TransformRanges wide;
      wide.yaw_min = -std::numbers::pi;
      wide.yaw_max = std::numbers::pi;
      wide.translation_min = {-10, -10, -10};
      wide.translation_max = {10, 10, 10};
      wide.scale_min = 0.5;
      wide.scale_max = 2.0;
      const SimilarityTransform t = sample_transform(rng, wide);
      Locations p(16, 3);
      for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) << rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-5, 5);
      const double err = (t.inverse().apply(t.apply(p)) - p).cwiseAbs().maxCoeff();
      r.value = std::max(r.value, err);
    }
    r.passed = r.value < r.threshold;
    out.push_back(r);
  }
  {
    CheckResult r{"projection_depth_consistency", true, 1.0, 0.99, 50, {}};
    for (std::size_t c = 0; c < 50; ++c) {
      const auto scene = generate_scene(opt.seed * 101ULL + c, SceneConfig{});
      r.value = std::min(r.value, projection_consistency(scene.cloud, scene.camera, scene.depth_gt, 0.1));
    }
    r.passed = r.value >= r.threshold;
    r.detail = "value = worst per-scene fraction within 0.1 m";
    out.push_back(r);
  }
  {
    CheckResult r{"fov_filter_recount", true, 0.0, 0.0, 50, {}};
    for (std::size_t c = 0; c < 50; ++c) {
      Rng rng(opt.seed * 7ULL + c);
      const auto scene = generate_scene(opt.seed * 211ULL + c, SceneConfig{});
      Points pts = scene.cloud.points();
      for (Eigen::Index i = 0; i < pts.rows(); i += 3) pts(i, 0) = rng.uniform(-20.0, 20.0);
      const PointCloud cloud(pts);
      const auto kept = fov_filter(cloud, scene.camera);
      std::size_t recount = 0;
      for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        Eigen::Vector3d pc = scene.camera.extrinsic_rotation * pts.row(i).head<3>().transpose() + scene.camera.extrinsic_translation;
        if (scene.camera.rectification) pc = *scene.camera.rectification * pc;
        if (pc.z() <= kDefaultMinDepth) continue;
        const Eigen::Vector3d pix = scene.camera.intrinsics * pc;
        const double u = pix.x() / pc.z(), v = pix.y() / pc.z();
        if (u >= 0 && v >= 0 && u < scene.camera.image_width && v < scene.camera.image_height) ++recount;
      }
      const std::size_t got = kept ? kept->size() : 0;
      r.value = std::max(r.value, std::abs(static_cast<double>(got) - static_cast<double>(recount)));
    }
    r.passed = r.value == 0.0;
    out.push_back(r);
  }
  {
    CheckResult r{"bilinear_exact_and_linear", true, 0.0, 1e-12, 100, {}};
    for (std::size_t c = 0; c < 100; ++c) {
      Rng rng(opt.seed * 17ULL + c);
      const auto map = diff::Var<double>::constant(detail::random_tensor({3, 5, 6}, rng));
      const std::size_t row = static_cast<std::size_t>(rng.below(5)), col = static_cast<std::size_t>(rng.below(5));
      const double t = rng.uniform();
      SampleCoords coords(2, 2);
      coords << static_cast<double>(col), static_cast<double>(row), static_cast<double>(col) + t, static_cast<double>(row);
      const auto s = bilinear_sample(map, coords).value();
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double a = map.value()(ch, row, col), b = map.value()(ch, row, col + 1);
        r.value = std::max({r.value, std::abs(s(0, ch) - a), std::abs(s(1, ch) - ((1 - t) * a + t * b))});
      }
    }
    r.passed = r.value < r.threshold;
    out.push_back(r);
  }
  {
    // KITTI-style calibration round trip: format, parse, reproject.
    CheckResult r{"calibration_reprojection", true, 0.0, 0.5, 20, {}};
    for (std::size_t c = 0; c < 20; ++c) {
      const auto scene = generate_scene(opt.seed * 313ULL + c, SceneConfig{});
      const CameraModel parsed = parse_kitti_calib(format_kitti_calib(scene.camera), scene.camera.image_width, scene.camera.image_height);
      const auto a = project(scene.cloud.locations(), scene.camera), b = project(scene.cloud.locations(), parsed);
      r.value = std::max(r.value, (a.uv - b.uv).cwiseAbs().maxCoeff());
    }
    r.passed = r.value < r.threshold;
    r.detail = "value = max pixel deviation";
    out.push_back(r);
  }
  return out;
}

inline CheckResult info_nce_uniform_check() {
  CheckResult r{"info_nce.uniform_ln_m", true, 0.0, 1e-6, 4, {}};
  for (std::size_t m : {2u, 4u, 16u, 256u}) {
    Tensor<double> e(Shape{m, 3});
    for (std::size_t i = 0; i < m; ++i) e(i, 0) = 1.0;
    MatchSet pairs;
    for (std::size_t i = 0; i < m; ++i) pairs.pairs.emplace_back(i, i);
    const auto v = diff::Var<double>::constant(e);
    const double loss = info_nce(v, v, pairs, InfoNceOptions{}).value()[0];
    r.value = std::max(r.value, std::abs(loss - std::log(static_cast<double>(m))));
  }
  r.passed = r.value < r.threshold;
  return r;
}

inline CheckResult info_nce_two_key_check() {
  // Positive similarity exceeds the negative by tau * ln 3.
  const double tau = 0.07, delta = tau * std::log(3.0);
  const double c0 = 0.2, c1 = 0.2 + delta;
  Tensor<double> q(Shape{2, 2}), k(Shape{2, 2});
  q(0, 0) = 1.0;
  q(1, 0) = 1.0;
  k(0, 0) = c1;
  k(0, 1) = std::sqrt(1 - c1 * c1);
  k(1, 0) = c0;
  k(1, 1) = std::sqrt(1 - c0 * c0);
  MatchSet pairs;
  pairs.pairs = {{0, 0}, {1, 1}};
  // Query 0: positive c1 against negative c0 -> ln(4/3); query 1 reversed.
  InfoNceOptions opt;
  opt.reduction = Reduction::kSum;
  const double total = info_nce(diff::Var<double>::constant(q), diff::Var<double>::constant(k), pairs, opt).value()[0];
  const double query0 = total - std::log(1.0 + 3.0);  // second query pays ln(1 + 3)
  const double err = std::abs(query0 - std::log(4.0 / 3.0));
  return {"info_nce.two_key_ln_4_3", err < 1e-6, err, 1e-6, 1, "value = |loss - ln(4/3)|"};
}

inline std::vector<CheckResult> losses_suite(const Options& opt) {
  std::vector<CheckResult> out;
  out.push_back(info_nce_uniform_check());
  out.push_back(info_nce_two_key_check());
  {
    CheckResult r{"info_nce.rotation_invariance", true, 0.0, 1e-6, 20, {}};
    for (std::size_t c = 0; c < 20; ++c) {
      Rng rng(opt.seed * 41ULL + c);
      const auto q = diff::l2_normalize(diff::Var<double>::constant(detail::random_tensor({8, 4}, rng)));
      const auto k = diff::l2_normalize(diff::Var<double>::constant(detail::random_tensor({8, 4}, rng)));
      Eigen::Matrix4d a = Eigen::Matrix4d::NullaryExpr([&] { return rng.normal(); });
      const Eigen::Matrix4d rot = Eigen::HouseholderQR<Eigen::Matrix4d>(a).householderQ();
      Tensor<double> rt(Shape{4, 4});
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) rt(i, j) = rot(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      const auto rv = diff::Var<double>::constant(rt);
      MatchSet pairs;
      for (std::size_t i = 0; i < 8; ++i) pairs.pairs.emplace_back(i, (i * 3) % 8);
      const double l0 = info_nce(q, k, pairs, InfoNceOptions{}).value()[0];
      const double l1 = info_nce(diff::matmul(q, rv), diff::matmul(k, rv), pairs, InfoNceOptions{}).value()[0];
      r.value = std::max(r.value, std::abs(l0 - l1));
    }
    r.passed = r.value < r.threshold;
    out.push_back(r);
  }
  {
    const double gamma = 0.3;
    std::vector<double> depth{3.0, 7.5, 12.0, 20.0};
    Tensor<double> pred(Shape{4});
    for (std::size_t i = 0; i < 4; ++i) pred[i] = std::log(depth[i]) + gamma;
    const double loss = si_loss(diff::Var<double>::constant(pred), std::span<const double>(depth), std::vector<bool>(4, true),
                                SiLossParams{}).value()[0];
    const double expect = 10.0 * gamma * std::sqrt(0.15);
    out.push_back({"si_loss.constant_offset", std::abs(loss - expect) < 1e-9, std::abs(loss - expect), 1e-9, 1,
                   "expected 10 |gamma| sqrt(0.15)"});
  }
  {
    Rng rng(opt.seed + 5);
    std::vector<double> depth(12);
    for (auto& d : depth) d = rng.uniform(2.0, 40.0);
    Tensor<double> pred(Shape{12});
    for (auto& p : pred.data()) p = rng.uniform(0.5, 3.5);
    Tensor<double> shifted = pred;
    for (auto& p : shifted.data()) p += std::log(1.7);
    auto eval = [&](const Tensor<double>& p, double lambda) {
      SiLossParams sp;
      sp.variance_weight = lambda;
      return si_loss(diff::Var<double>::constant(p), std::span<const double>(depth), std::vector<bool>(12, true), sp).value()[0];
    };
    const double inv = std::abs(eval(pred, 1.0) - eval(shifted, 1.0));
    const double sens = std::abs(eval(pred, 0.85) - eval(shifted, 0.85));
    out.push_back({"si_loss.scale_invariance", inv < 1e-9 && sens > 1e-3, inv, 1e-9, 1,
                   "lambda 1 invariant, lambda 0.85 sensitive (" + std::to_string(sens) + ")"});
  }
  {
    Rng rng(opt.seed + 9);
    auto point_w = diff::Var<double>::parameter(detail::random_tensor({4, 5}, rng));
    auto image_w = diff::Var<double>::parameter(detail::random_tensor({4, 5}, rng));
    const auto x = diff::Var<double>::constant(detail::random_tensor({6, 4}, rng));
    const auto y = diff::Var<double>::constant(detail::random_tensor({6, 4}, rng));
    const auto ea = diff::l2_normalize(diff::matmul(x, point_w));
    const auto eg = diff::l2_normalize(diff::matmul(y, image_w));
    MatchSet pairs;
    for (std::size_t i = 0; i < 6; ++i) pairs.pairs.emplace_back(i, i);
    const auto l = inter_loss(ea, eg, pairs, InfoNceOptions{});
    diff::backward(l);
    double leaked = 0.0;
    const Tensor<double> point_grad = point_w.grad(), image_grad = image_w.grad();
    for (double g : point_grad.data()) leaked = std::max(leaked, std::abs(g));
    double reached = 0.0;
    for (double g : image_grad.data()) reached = std::max(reached, std::abs(g));
    const double plain = info_nce(ea, eg, pairs, InfoNceOptions{}).value()[0];
    out.push_back({"inter_loss.stop_gradient", leaked == 0.0 && reached > 0.0 && plain == l.value()[0], leaked, 0.0, 1,
                   "point-side gradient must be exactly zero, image side nonzero, value unchanged"});
  }
  {
    const auto a = diff::Var<double>::constant(Tensor<double>::scalar(0.5));
    const auto b = diff::Var<double>::constant(Tensor<double>::scalar(0.25));
    const double v = total_loss(a, b, LossWeights{}).value()[0];
    LossWeights only_intra;
    only_intra.mu_inter = 0.0;
    LossWeights only_inter;
    only_inter.lambda_intra = 0.0;
    const bool ok = v == 0.75 && total_loss(a, b, only_intra).value()[0] == 0.5 && total_loss(a, b, only_inter).value()[0] == 0.25;
    out.push_back({"total_loss.linear", ok, v, 0.75, 1, {}});
  }
  return out;
}

inline bool all_passed(const std::vector<CheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.passed; });
}

}  // namespace simipu::verify
