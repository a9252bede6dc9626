#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "simipu/dataio.hpp"
#include "simipu/encoders.hpp"
#include "simipu/error.hpp"
#include "simipu/losses.hpp"

namespace simipu {

struct ProbeConfig {
  std::size_t pixels_per_scene = 512;
  std::size_t epochs = 300;
  double lr = 0.05;  ///< Adam, cosine-decayed to 0 over the epochs
  double holdout_fraction = 0.25;
  std::uint64_t seed = 0;
  SiLossParams si;

  void validate() const {
    if (pixels_per_scene < 2) throw ConfigError("probe needs at least 2 pixels per scene");
    if (epochs == 0) throw ConfigError("probe needs at least one epoch");
    if (!(lr > 0.0)) throw ConfigError("probe learning rate must be positive");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("probe holdout fraction must lie in (0, 1)");
    si.validate();
  }
};

/// Probe inputs for one scene: one feature row per sampled pixel and the
/// true depth there.
struct ProbeSample {
  Tensor<double> features;  ///< m x d
  std::vector<double> depth;
};

struct ProbePixels {
  std::vector<std::size_t> rows, cols;
};

/// Pixels with ground-truth depth, a seeded subset chosen independently of
/// any encoder so that competing encoders see the same pixels.
inline ProbePixels probe_pixels(const SyntheticScene& scene, const ProbeConfig& config) {
  const std::size_t h = scene.depth_gt.dim(0), w = scene.depth_gt.dim(1);
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < h * w; ++i)
    if (scene.depth_gt[i] > 0.0) valid.push_back(i);
  if (valid.size() < 2) throw EmptyTargetError("probe: scene " + std::to_string(scene.seed) + " has no depth pixels");
  Rng rng(config.seed ^ (scene.seed * 0x9e3779b97f4a7c15ULL));
  const std::size_t k = std::min(config.pixels_per_scene, valid.size());
  for (std::size_t i = 0; i < k; ++i) std::swap(valid[i], valid[i + static_cast<std::size_t>(rng.below(valid.size() - i))]);
  valid.resize(k);
  std::sort(valid.begin(), valid.end());
  ProbePixels px;
  for (std::size_t i : valid) {
    px.rows.push_back(i / w);
    px.cols.push_back(i % w);
  }
  return px;
}

/// Frozen image-encoder features bilinearly sampled at the probe pixels.
/// Normalization uses each image's own statistics and updates nothing.
template <class T>
ProbeSample encoder_probe_sample(const SyntheticScene& scene, EncoderParams<T>& params, const EncoderConfig& config,
                                 const ProbeConfig& probe) {
  const ProbePixels px = probe_pixels(scene, probe);
  const auto image = diff::Var<T>::constant(scene.image.cast<T>());
  const auto fmap = encode_image(image, params, config, diff::NormMode::kBatch, false);
  SampleCoords coords(static_cast<Eigen::Index>(px.rows.size()), 2);
  const double inv = 1.0 / static_cast<double>(fmap.stride);
  ProbeSample s;
  for (std::size_t i = 0; i < px.rows.size(); ++i) {
    coords(static_cast<Eigen::Index>(i), 0) = static_cast<double>(px.cols[i]) * inv;
    coords(static_cast<Eigen::Index>(i), 1) = static_cast<double>(px.rows[i]) * inv;
    s.depth.push_back(scene.depth_gt(px.rows[i], px.cols[i]));
  }
  s.features = bilinear_sample(fmap.features, coords).value().template cast<double>();
  return s;
}

/// Realizable control: the single feature is the true log depth.
inline ProbeSample oracle_probe_sample(const SyntheticScene& scene, const ProbeConfig& probe) {
  const ProbePixels px = probe_pixels(scene, probe);
  ProbeSample s;
  s.features = Tensor<double>(Shape{px.rows.size(), 1});
  for (std::size_t i = 0; i < px.rows.size(); ++i) {
    s.depth.push_back(scene.depth_gt(px.rows[i], px.cols[i]));
    s.features(i, 0) = std::log(s.depth.back());
  }
  return s;
}

struct ProbeResult {
  double rmse = 0.0;  ///< meters, over all held-out probe pixels
  double si = 0.0;    ///< mean held-out SI loss per scene
  std::vector<double> epoch_losses;  ///< mean training SI loss before each update
};

/// Fit log-depth = x . w + b on standardized features with the SI loss
/// (full batch, Adam), then evaluate on the held-out samples.
inline ProbeResult fit_linear_probe(const std::vector<ProbeSample>& train, const std::vector<ProbeSample>& held_out,
                                    const ProbeConfig& config) {
  config.validate();
  if (train.empty() || held_out.empty()) throw ConfigError("probe split is degenerate: both sides need scenes");
  const std::size_t d = train.front().features.dim(1);
  for (const auto* set : {&train, &held_out})
    for (const auto& s : *set)
      if (s.features.dim(1) != d || s.features.dim(0) != s.depth.size()) throw DimensionError("probe samples disagree in shape");

  std::vector<double> mean(d, 0.0), stdev(d, 0.0);
  double log_mean = 0.0;
  std::size_t count = 0;
  for (const auto& s : train)
    for (std::size_t i = 0; i < s.depth.size(); ++i, ++count) {
      for (std::size_t c = 0; c < d; ++c) mean[c] += s.features(i, c);
      log_mean += std::log(s.depth[i]);
    }
  for (auto& v : mean) v /= static_cast<double>(count);
  log_mean /= static_cast<double>(count);
  for (const auto& s : train)
    for (std::size_t i = 0; i < s.depth.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) stdev[c] += (s.features(i, c) - mean[c]) * (s.features(i, c) - mean[c]);
  for (auto& v : stdev) v = std::sqrt(v / static_cast<double>(count));
  auto standardize = [&](const ProbeSample& s) {
    Tensor<double> x = s.features;
    for (std::size_t i = 0; i < s.depth.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) x(i, c) = stdev[c] > 1e-12 ? (x(i, c) - mean[c]) / stdev[c] : 0.0;
    return diff::Var<double>::constant(std::move(x));
  };
  std::vector<diff::Var<double>> xtrain, xheld;
  for (const auto& s : train) xtrain.push_back(standardize(s));
  for (const auto& s : held_out) xheld.push_back(standardize(s));

  auto w = diff::Var<double>::parameter(Tensor<double>(Shape{d, 1}));
  auto b = diff::Var<double>::parameter(Tensor<double>(Shape{1}, log_mean));
  auto predict = [&](const diff::Var<double>& x) { return diff::add_bias(diff::matmul(x, w), b); };
  auto scene_loss = [&](const diff::Var<double>& x, const ProbeSample& s) {
    return si_loss(predict(x), std::span<const double>(s.depth), std::vector<bool>(s.depth.size(), true), config.si);
  };

  std::vector<double> m(d + 1, 0.0), v(d + 1, 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ProbeResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    w.zero_grad();
    b.zero_grad();
    double total = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      auto l = diff::scale(scene_loss(xtrain[i], train[i]), 1.0 / static_cast<double>(train.size()));
      total += l.value()[0];
      diff::backward(l);
    }
    if (!std::isfinite(total)) throw NumericError("probe loss became non-finite at epoch " + std::to_string(epoch));
    result.epoch_losses.push_back(total);
    const double lr = config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(config.epochs)));
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(epoch + 1));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(epoch + 1));
    const Tensor<double> gw = w.grad(), gb = b.grad();
    auto wv = w.mutable_value().data();
    auto bv = b.mutable_value().data();
    for (std::size_t k = 0; k <= d; ++k) {
      const double g = k < d ? gw[k] : gb[0];
      m[k] = beta1 * m[k] + (1.0 - beta1) * g;
      v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
      const double step = lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
      if (k < d) {
        wv[k] -= step;
      } else {
        bv[0] -= step;
      }
    }
  }

  double se = 0.0, si = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const auto pred = predict(xheld[i]).value();
    for (std::size_t k = 0; k < held_out[i].depth.size(); ++k, ++n) {
      const double e = std::exp(pred[k]) - held_out[i].depth[k];
      se += e * e;
    }
    si += scene_loss(xheld[i], held_out[i]).value()[0];
  }
  result.rmse = std::sqrt(se / static_cast<double>(n));
  result.si = si / static_cast<double>(held_out.size());
  return result;
}

/// Last ceil(fraction * n) scenes are held out.
inline std::pair<std::vector<SyntheticScene>, std::vector<SyntheticScene>> split_scenes(const std::vector<SyntheticScene>& scenes,
                                                                                       double holdout_fraction) {
  const auto held = static_cast<std::size_t>(std::ceil(holdout_fraction * static_cast<double>(scenes.size())));
  if (scenes.size() < 2 || held == 0 || held >= scenes.size()) {
    throw ConfigError("probe split is degenerate: " + std::to_string(scenes.size()) + " scenes cannot be split by fraction " +
                      std::to_string(holdout_fraction));
  }
  const auto cut = scenes.begin() + static_cast<std::ptrdiff_t>(scenes.size() - held);
  return {std::vector<SyntheticScene>(scenes.begin(), cut), std::vector<SyntheticScene>(cut, scenes.end())};
}

/// Frozen-encoder linear depth probe.
template <class T>
ProbeResult depth_probe(EncoderParams<T>& params, const EncoderConfig& encoder, const std::vector<SyntheticScene>& scenes,
                        const ProbeConfig& config) {
  config.validate();
  const auto [train, held] = split_scenes(scenes, config.holdout_fraction);
  std::vector<ProbeSample> a, b;
  for (const auto& s : train) a.push_back(encoder_probe_sample(s, params, encoder, config));
  for (const auto& s : held) b.push_back(encoder_probe_sample(s, params, encoder, config));
  return fit_linear_probe(a, b, config);
}

inline ProbeResult oracle_depth_probe(const std::vector<SyntheticScene>& scenes, const ProbeConfig& config) {
  config.validate();
  const auto [train, held] = split_scenes(scenes, config.holdout_fraction);
  std::vector<ProbeSample> a, b;
  for (const auto& s : train) a.push_back(oracle_probe_sample(s, config));
  for (const auto& s : held) b.push_back(oracle_probe_sample(s, config));
  return fit_linear_probe(a, b, config);
}

}  // namespace simipu
