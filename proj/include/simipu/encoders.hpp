#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "simipu/diffcore.hpp"
#include "simipu/error.hpp"
#include "simipu/geometry.hpp"
#include "simipu/rng.hpp"
#include "simipu/sampling.hpp"

namespace simipu {

struct PointStageConfig {
  std::size_t points = 0;
  std::size_t width = 0;
  double radius = 0.0;
  std::size_t max_neighbors = 16;
};

/// Shapes of both encoders and the projection heads.
struct EncoderConfig {
  std::vector<PointStageConfig> point_stages{{512, 32, 0.8, 16}, {256, 64, 1.6, 16}, {128, 128, 3.2, 16}};
  std::size_t mlp_layers_per_stage = 2;
  /// Stage-1 point features are the cloud columns after x, y, z.
  std::size_t point_input_channels = 1;

  std::vector<std::size_t> image_channels{16, 32, 64, 64};
  std::size_t convs_per_stage = 2;
  std::size_t image_input_channels = 3;

  std::size_t embedding_dim = 128;
  bool normalize_embeddings = true;

  std::size_t image_stride() const { return image_channels.empty() ? 1 : std::size_t{1} << (image_channels.size() - 1); }
  std::size_t point_feature_dim() const { return point_stages.back().width; }
  std::size_t image_feature_dim() const { return image_channels.back(); }

  void validate() const {
    if (point_stages.empty()) throw ConfigError("encoder needs at least one set-abstraction stage");
    for (std::size_t s = 0; s < point_stages.size(); ++s) {
      const auto& st = point_stages[s];
      if (st.points == 0 || st.width == 0 || !(st.radius > 0.0) || st.max_neighbors == 0) {
        throw ConfigError("point stage " + std::to_string(s) + " has a zero size or non-positive radius");
      }
      if (s > 0 && st.points % 2 != 0) throw ConfigError("fused-sampling stages need an even point count");
      if (s > 0 && st.points > point_stages[s - 1].points) throw ConfigError("point stages must not grow");
    }
    if (mlp_layers_per_stage == 0 || convs_per_stage == 0) throw ConfigError("encoder depth must be positive");
    if (image_channels.empty()) throw ConfigError("image encoder needs at least one stage");
    if (embedding_dim == 0) throw ConfigError("embedding dimension must be positive");
  }
};

template <class T>
struct ConvBlock {
  diff::Var<T> kernel;
  diff::Var<T> gamma;
  diff::Var<T> beta;
  diff::NormStats<T> stats;
};

template <class T>
struct HeadParams {
  Linear<T> hidden;
  Linear<T> output;
};

enum class Branch { kPoint, kImage };

inline const char* branch_prefix(Branch b) { return b == Branch::kPoint ? "point_" : "image_"; }

inline Branch branch_of(const std::string& name) {
  if (name.rfind("point_", 0) == 0) return Branch::kPoint;
  if (name.rfind("image_", 0) == 0) return Branch::kImage;
  throw ConfigError("parameter '" + name + "' belongs to no branch");
}

template <class T>
struct ParamEntry {
  std::string name;
  diff::Var<T> var;
  bool decay;  ///< weight decay applies (not biases or normalization affine terms)
  Branch branch;
};

template <class T>
struct BufferEntry {
  std::string name;
  Tensor<T>* tensor;
};

template <class T>
struct EncoderParams {
  std::vector<std::vector<Linear<T>>> point_backbone;
  std::vector<std::vector<ConvBlock<T>>> image_backbone;
  HeadParams<T> point_head;
  HeadParams<T> image_head;

  /// Every trainable tensor with a stable name. Names start with the
  /// branch prefix, which is what the optimizers and partial checkpoint
  /// loads key on.
  std::vector<ParamEntry<T>> registry() const {
    std::vector<ParamEntry<T>> out;
    for (std::size_t s = 0; s < point_backbone.size(); ++s)
      for (std::size_t l = 0; l < point_backbone[s].size(); ++l) {
        const std::string base = "point_backbone.sa" + std::to_string(s) + ".mlp" + std::to_string(l);
        out.push_back({base + ".weight", point_backbone[s][l].weight, true, Branch::kPoint});
        out.push_back({base + ".bias", point_backbone[s][l].bias, false, Branch::kPoint});
      }
    add_head(out, "point_head", point_head, Branch::kPoint);
    for (std::size_t s = 0; s < image_backbone.size(); ++s)
      for (std::size_t c = 0; c < image_backbone[s].size(); ++c) {
        const std::string base = "image_backbone.stage" + std::to_string(s) + ".conv" + std::to_string(c);
        out.push_back({base + ".kernel", image_backbone[s][c].kernel, true, Branch::kImage});
        out.push_back({base + ".gamma", image_backbone[s][c].gamma, false, Branch::kImage});
        out.push_back({base + ".beta", image_backbone[s][c].beta, false, Branch::kImage});
      }
    add_head(out, "image_head", image_head, Branch::kImage);
    return out;
  }

  /// Non-trainable state (running normalization statistics).
  std::vector<BufferEntry<T>> buffers() {
    std::vector<BufferEntry<T>> out;
    for (std::size_t s = 0; s < image_backbone.size(); ++s)
      for (std::size_t c = 0; c < image_backbone[s].size(); ++c) {
        const std::string base = "image_backbone.stage" + std::to_string(s) + ".conv" + std::to_string(c);
        out.push_back({base + ".running_mean", &image_backbone[s][c].stats.mean});
        out.push_back({base + ".running_var", &image_backbone[s][c].stats.var});
      }
    return out;
  }

 private:
  static void add_head(std::vector<ParamEntry<T>>& out, const std::string& base, const HeadParams<T>& h, Branch b) {
    out.push_back({base + ".hidden.weight", h.hidden.weight, true, b});
    out.push_back({base + ".hidden.bias", h.hidden.bias, false, b});
    out.push_back({base + ".output.weight", h.output.weight, true, b});
    out.push_back({base + ".output.bias", h.output.bias, false, b});
  }
};

namespace detail {

template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Linear<T> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {diff::Var<T>::parameter(kaiming_uniform<T>(Shape{in, out}, in, rng)),
          diff::Var<T>::parameter(Tensor<T>(Shape{out}))};
}

}  // namespace detail

/// Kaiming-uniform (fan-in) weights, zero biases, unit/zero normalization
/// affine terms, identity running statistics.
template <class T>
EncoderParams<T> init_params(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams<T> p;
  std::size_t d_in = config.point_input_channels;
  for (const auto& st : config.point_stages) {
    std::vector<Linear<T>> mlp;
    std::size_t in = 3 + d_in;
    for (std::size_t l = 0; l < config.mlp_layers_per_stage; ++l) {
      mlp.push_back(detail::init_linear<T>(in, st.width, rng));
      in = st.width;
    }
    p.point_backbone.push_back(std::move(mlp));
    d_in = st.width;
  }
  p.point_head = {detail::init_linear<T>(d_in, d_in, rng), detail::init_linear<T>(d_in, config.embedding_dim, rng)};

  std::size_t c_in = config.image_input_channels;
  for (std::size_t ch : config.image_channels) {
    std::vector<ConvBlock<T>> stage;
    for (std::size_t c = 0; c < config.convs_per_stage; ++c) {
      ConvBlock<T> blk;
      blk.kernel = diff::Var<T>::parameter(detail::kaiming_uniform<T>(Shape{ch, c_in, 3, 3}, c_in * 9, rng));
      blk.gamma = diff::Var<T>::parameter(Tensor<T>(Shape{ch}, T(1)));
      blk.beta = diff::Var<T>::parameter(Tensor<T>(Shape{ch}));
      blk.stats = diff::NormStats<T>::identity(ch);
      stage.push_back(std::move(blk));
      c_in = ch;
    }
    p.image_backbone.push_back(std::move(stage));
  }
  const std::size_t d_img = config.image_feature_dim();
  p.image_head = {detail::init_linear<T>(d_img, d_img, rng), detail::init_linear<T>(d_img, config.embedding_dim, rng)};
  return p;
}

/// How each set-abstraction stage picks its first center.
enum class StartPolicy {
  kZero,       ///< index 0 (tests)
  kRandom,     ///< seeded random per stage (training)
  kCanonical,  ///< lexicographically smallest (x, y, z); invariant to row order
};

inline std::size_t canonical_start(const Locations& loc) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < loc.rows(); ++i) {
    const auto b = static_cast<Eigen::Index>(best);
    if (std::tie(loc(i, 0), loc(i, 1), loc(i, 2)) < std::tie(loc(b, 0), loc(b, 1), loc(b, 2))) best = static_cast<std::size_t>(i);
  }
  return best;
}

/// Point branch: chained set-abstraction stages. Stage 1 centers come from
/// D-FPS alone (its input features are raw reflectance); later stages use
/// the fused D-FPS/F-FPS sampler.
///
/// Stage sizes shrink to fit small clouds; only a cloud smaller than the
/// final stage is rejected.
template <class T>
SampledSet<T> encode_points(const PointCloud& cloud, const EncoderParams<T>& params, const EncoderConfig& config,
                            Rng& rng, StartPolicy start = StartPolicy::kRandom) {
  const std::size_t final_count = config.point_stages.back().points;
  if (cloud.size() < final_count) {
    throw UndersizedSceneError("scene has " + std::to_string(cloud.size()) + " points, the point encoder needs at least " +
                               std::to_string(final_count));
  }
  if (cloud.channels() - 3 != config.point_input_channels) {
    throw DimensionError("point cloud has " + std::to_string(cloud.channels() - 3) + " feature channels, encoder expects " +
                         std::to_string(config.point_input_channels));
  }
  if (params.point_backbone.size() != config.point_stages.size()) throw DimensionError("point backbone does not match config");

  Locations loc = cloud.locations();
  Tensor<T> raw(Shape{cloud.size(), config.point_input_channels});
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t c = 0; c < config.point_input_channels; ++c)
      raw(i, c) = static_cast<T>(cloud.points()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(3 + c)));
  diff::Var<T> feats = diff::Var<T>::constant(std::move(raw));
  std::vector<std::size_t> origin(cloud.size());
  std::iota(origin.begin(), origin.end(), std::size_t{0});

  SampledSet<T> set;
  for (std::size_t s = 0; s < config.point_stages.size(); ++s) {
    const auto& st = config.point_stages[s];
    const auto n = static_cast<std::size_t>(loc.rows());
    std::size_t k = std::min(st.points, n);
    if (s > 0 && k % 2 != 0) --k;
    SetAbstractionSpec spec;
    spec.centers = k;
    spec.radius = st.radius;
    spec.max_neighbors = st.max_neighbors;
    spec.sampler = s == 0 ? CenterSampler::kDistance : CenterSampler::kFused;
    switch (start) {
      case StartPolicy::kZero: spec.start_index = 0; break;
      case StartPolicy::kRandom: spec.start_index = static_cast<std::size_t>(rng.below(n)); break;
      case StartPolicy::kCanonical: spec.start_index = canonical_start(loc); break;
    }
    set = set_abstraction(loc, feats, params.point_backbone[s], spec, rng);
    for (auto& idx : set.source_indices) idx = origin[idx];
    origin = set.source_indices;
    loc = set.locations;
    feats = set.features;
  }
  return set;
}

template <class T>
struct ImageFeatureMap {
  diff::Var<T> features;  ///< d x H' x W'
  std::size_t stride = 1;
};

/// Image branch: stages of (3x3 conv, channel norm, relu) x convs_per_stage,
/// 2x2 average pooling between stages.
template <class T>
ImageFeatureMap<T> encode_image(const diff::Var<T>& image, EncoderParams<T>& params, const EncoderConfig& config,
                                diff::NormMode mode = diff::NormMode::kBatch, bool update_stats = false) {
  if (image.value().rank() != 3 || image.shape()[0] != config.image_input_channels) {
    throw DimensionError("encode_image: expected a " + std::to_string(config.image_input_channels) +
                         " x H x W image, got " + shape_string(image.shape()));
  }
  const std::size_t stride = config.image_stride();
  if (image.shape()[1] % stride != 0 || image.shape()[2] % stride != 0) {
    throw ConfigError("encode_image: image size " + shape_string(image.shape()) + " is not divisible by stride " +
                      std::to_string(stride));
  }
  diff::Var<T> x = image;
  for (std::size_t s = 0; s < params.image_backbone.size(); ++s) {
    if (s > 0) x = diff::avg_pool2d(x, 2);
    for (auto& blk : params.image_backbone[s]) {
      x = diff::conv2d(x, blk.kernel, 1, 1);
      x = diff::channel_norm(x, blk.gamma, blk.beta, blk.stats, mode, update_stats);
      x = diff::relu(x);
    }
  }
  return {x, stride};
}

/// Two-layer MLP (hidden width = input width, relu) to the embedding space,
/// then optional row-wise l2 normalization.
template <class T>
diff::Var<T> project_head(const diff::Var<T>& features, const HeadParams<T>& head, bool normalize = true) {
  if (features.value().rank() != 2 || features.shape()[1] != head.hidden.in_features()) {
    throw DimensionError("project_head: features " + shape_string(features.shape()) + " do not fit head input width " +
                         std::to_string(head.hidden.in_features()));
  }
  auto h = diff::relu(apply_linear(head.hidden, features));
  auto z = apply_linear(head.output, h);
  return normalize ? diff::l2_normalize(z, T(1e-12)) : z;
}

}  // namespace simipu
