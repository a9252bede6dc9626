#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "simipu/encoders.hpp"
#include "simipu/error.hpp"

namespace simipu {

/// Momentum SGD with coupled L2 weight decay (image branch).
struct SgdConfig {
  double lr = 0.003;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay (point branch).
struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.95;
  double beta2 = 0.99;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

/// One rule per parameter partition. Defaults are the desk-scale rates
/// (full-scale rates divided by 10 for batches of four scenes);
/// full_scale() returns the original recipe.
struct HybridOptimConfig {
  SgdConfig image;
  AdamWConfig point;

  static HybridOptimConfig full_scale() {
    HybridOptimConfig c;
    c.image.lr = 0.03;
    c.point.lr = 1e-3;
    return c;
  }

  void validate() const {
    if (!(image.lr > 0.0) || !(point.lr > 0.0)) throw ConfigError("optimizer learning rates must be positive");
    auto unit = [](double v) { return v >= 0.0 && v < 1.0; };
    if (!unit(image.momentum) || !unit(point.beta1) || !unit(point.beta2)) {
      throw ConfigError("optimizer momenta and betas must lie in [0, 1)");
    }
    if (image.weight_decay < 0.0 || point.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  }
};

/// Per-parameter moments, index-aligned with EncoderParams::registry().
/// Image-branch entries use `first` as the momentum buffer; point-branch
/// entries use `first`/`second` as Adam's moment estimates.
template <class T>
struct OptimizerState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  std::uint64_t adam_steps = 0;

  static OptimizerState zeros(const std::vector<ParamEntry<T>>& registry) {
    OptimizerState s;
    for (const auto& e : registry) {
      s.first.emplace_back(e.var.shape());
      s.second.push_back(e.branch == Branch::kPoint ? Tensor<T>(e.var.shape()) : Tensor<T>());
    }
    return s;
  }

  /// Moment names as stored in checkpoints.
  static std::string first_name(const ParamEntry<T>& e) {
    return e.name + (e.branch == Branch::kImage ? "#momentum" : "#adam_m");
  }
  static std::string second_name(const ParamEntry<T>& e) { return e.name + "#adam_v"; }
};

/// Apply SGD to the image partition and AdamW to the point partition using
/// the gradients currently accumulated on each parameter. Each rule reads
/// and writes only its own partition's moments.
template <class T>
void hybrid_update(const std::vector<ParamEntry<T>>& registry, OptimizerState<T>& state, const HybridOptimConfig& config) {
  if (state.first.size() != registry.size()) throw DimensionError("optimizer state does not match the parameter registry");
  ++state.adam_steps;
  const double bc1 = 1.0 - std::pow(config.point.beta1, static_cast<double>(state.adam_steps));
  const double bc2 = 1.0 - std::pow(config.point.beta2, static_cast<double>(state.adam_steps));
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto& e = registry[i];
    diff::Var<T> var = e.var;
    auto w = var.mutable_value().data();
    const Tensor<T> grad = var.grad();
    const auto g = grad.data();
    auto m = state.first[i].data();
    if (e.branch == Branch::kImage) {
      const auto& c = config.image;
      const T wd = e.decay ? static_cast<T>(c.weight_decay) : T(0);
      for (std::size_t k = 0; k < w.size(); ++k) {
        const T gk = g[k] + wd * w[k];
        m[k] = static_cast<T>(c.momentum) * m[k] + gk;
        w[k] -= static_cast<T>(c.lr) * m[k];
      }
    } else {
      const auto& c = config.point;
      auto v = state.second[i].data();
      const T decay = e.decay ? static_cast<T>(c.lr * c.weight_decay) : T(0);
      const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
      for (std::size_t k = 0; k < w.size(); ++k) {
        w[k] -= decay * w[k];
        m[k] = b1 * m[k] + (T(1) - b1) * g[k];
        v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
        const T mhat = m[k] / static_cast<T>(bc1);
        const T vhat = v[k] / static_cast<T>(bc2);
        w[k] -= static_cast<T>(c.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(c.eps));
      }
    }
  }
}

template <class T>
double grad_norm(const std::vector<ParamEntry<T>>& registry, Branch branch) {
  double ss = 0.0;
  for (const auto& e : registry) {
    if (e.branch != branch || !e.var.has_grad()) continue;
    for (T v : e.var.node()->grad.data()) ss += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(ss);
}

template <class T>
void zero_grads(const std::vector<ParamEntry<T>>& registry) {
  for (const auto& e : registry) {
    diff::Var<T> v = e.var;
    v.zero_grad();
  }
}

}  // namespace simipu
