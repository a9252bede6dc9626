#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "simipu/diffcore.hpp"
#include "simipu/error.hpp"
#include "simipu/matching.hpp"

namespace simipu {

/// lambda_intra * L_intra + mu_inter * L_inter, with InfoNCE temperature.
struct LossWeights {
  double lambda_intra = 1.0;
  double mu_inter = 1.0;
  double temperature = 0.07;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("loss temperature must be positive");
    if (lambda_intra < 0.0 || mu_inter < 0.0) throw ConfigError("loss weights must be non-negative");
    if (lambda_intra == 0.0 && mu_inter == 0.0) throw ConfigError("loss weights cannot both be zero");
  }
};

enum class Reduction { kMean, kSum };

struct InfoNceOptions {
  double temperature = 0.07;
  Reduction reduction = Reduction::kMean;
  /// Reject rows that are not unit length (within 1e-4). Turned off when the
  /// heads run without normalization.
  bool require_unit_rows = true;
};

namespace detail {

template <class T>
void check_unit_rows(const Tensor<T>& x, std::span<const std::size_t> rows, const char* what) {
  const std::size_t d = x.row_size();
  for (std::size_t r : rows) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += static_cast<double>(x(r, c)) * static_cast<double>(x(r, c));
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-4) {
      throw ConfigError(std::string("info_nce: ") + what + " row " + std::to_string(r) + " is not unit length");
    }
  }
}

}  // namespace detail

/// Contrastive loss over matched pairs. For pair (i, j) the query is row i
/// of `queries`, the positive is row j of `keys`, and the negatives are the
/// keys of every other pair in the set:
///
///   -log( exp(q_i . k_j / tau) / sum_{(., k) in pairs} exp(q_i . k_k / tau) )
///
/// reduced by mean (default) or sum over pairs.
template <class T>
diff::Var<T> info_nce(const diff::Var<T>& queries, const diff::Var<T>& keys, const MatchSet& pairs,
                      const InfoNceOptions& options) {
  if (!(options.temperature > 0.0)) throw ConfigError("info_nce: temperature must be positive");
  if (pairs.size() < 2) {
    throw DegenerateBatchError("info_nce: need at least 2 pairs for negatives, got " + std::to_string(pairs.size()));
  }
  std::vector<std::size_t> qi, ki;
  qi.reserve(pairs.size());
  ki.reserve(pairs.size());
  for (const auto& [q, k] : pairs.pairs) {
    qi.push_back(q);
    ki.push_back(k);
  }
  {
    auto sq = qi, sk = ki;
    std::sort(sq.begin(), sq.end());
    std::sort(sk.begin(), sk.end());
    if (std::adjacent_find(sq.begin(), sq.end()) != sq.end() || std::adjacent_find(sk.begin(), sk.end()) != sk.end()) {
      throw ConfigError("info_nce: pairs are not one-to-one");
    }
  }
  if (options.require_unit_rows) {
    detail::check_unit_rows(queries.value(), qi, "query");
    detail::check_unit_rows(keys.value(), ki, "key");
  }
  auto q = diff::gather_rows(queries, std::span<const std::size_t>(qi));
  auto k = diff::gather_rows(keys, std::span<const std::size_t>(ki));
  auto logits = diff::scale(diff::matmul_nt(q, k), static_cast<T>(1.0 / options.temperature));
  std::vector<std::size_t> targets(pairs.size());
  std::iota(targets.begin(), targets.end(), std::size_t{0});
  auto per_pair = diff::softmax_cross_entropy(logits, std::span<const std::size_t>(targets));
  return options.reduction == Reduction::kMean ? diff::mean(per_pair) : diff::sum(per_pair);
}

/// View-alpha embeddings against view-beta embeddings; both sides keep
/// their gradients.
template <class T>
diff::Var<T> intra_loss(const diff::Var<T>& alpha_emb, const diff::Var<T>& beta_emb, const MatchSet& m1,
                        const InfoNceOptions& options) {
  return info_nce(alpha_emb, beta_emb, m1, options);
}

/// Point embeddings (gradient cropped) against sampled image embeddings:
/// only the image side receives gradient.
template <class T>
diff::Var<T> inter_loss(const diff::Var<T>& alpha_emb, const diff::Var<T>& gamma_emb, const MatchSet& m2,
                        const InfoNceOptions& options) {
  return info_nce(diff::stop_gradient(alpha_emb), gamma_emb, m2, options);
}

template <class T>
diff::Var<T> total_loss(const diff::Var<T>& l_intra, const diff::Var<T>& l_inter, const LossWeights& weights) {
  return diff::add(diff::scale(l_intra, static_cast<T>(weights.lambda_intra)),
                   diff::scale(l_inter, static_cast<T>(weights.mu_inter)));
}

enum class SiLossForm {
  /// alpha * sqrt(mean(g^2) - lambda * mean(g)^2), the established form.
  kVariance,
  /// alpha * sqrt(mean(g^2) + (lambda / T) * (sum g)^2), sign and
  /// normalization exactly as sometimes printed.
  kAsPrinted,
};

struct SiLossParams {
  double variance_weight = 0.85;
  double scale = 10.0;
  SiLossForm form = SiLossForm::kVariance;

  void validate() const {
    if (!(variance_weight >= 0.0 && variance_weight <= 1.0)) throw ConfigError("si_loss: variance weight must lie in [0, 1]");
    if (!(scale > 0.0)) throw ConfigError("si_loss: scale must be positive");
  }
};

/// Scale-invariant log-depth loss over the pixels where `valid` is set,
/// with g = predicted_log_depth - log(true_depth).
template <class T>
diff::Var<T> si_loss(const diff::Var<T>& predicted_log_depth, std::span<const double> true_depth,
                     const std::vector<bool>& valid, const SiLossParams& params) {
  params.validate();
  const std::size_t n = predicted_log_depth.size();
  if (true_depth.size() != n || valid.size() != n) throw DimensionError("si_loss: prediction, target and mask sizes differ");
  std::vector<std::size_t> rows;
  std::vector<T> log_target;
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    if (!(true_depth[i] > 0.0)) throw ConfigError("si_loss: true depth must be positive on valid pixels");
    rows.push_back(i);
    log_target.push_back(static_cast<T>(std::log(true_depth[i])));
  }
  if (rows.empty()) throw EmptyTargetError("si_loss: no valid pixels");
  const std::size_t count = rows.size();
  auto pred = diff::gather_rows(predicted_log_depth, std::span<const std::size_t>(rows));
  auto target = diff::Var<T>::constant(Tensor<T>(pred.shape(), std::move(log_target)));
  auto g = diff::sub(pred, target);
  auto mean_sq = diff::mean(diff::square(g));
  auto sq_mean = diff::square(diff::mean(g));
  diff::Var<T> inner;
  if (params.form == SiLossForm::kVariance) {
    inner = diff::sub(mean_sq, diff::scale(sq_mean, static_cast<T>(params.variance_weight)));
  } else {
    inner = diff::add(mean_sq, diff::scale(sq_mean, static_cast<T>(params.variance_weight * static_cast<double>(count))));
  }
  // relu absorbs round-off below zero when variance_weight = 1 and g is constant
  return diff::scale(diff::sqrt(diff::relu(inner)), static_cast<T>(params.scale));
}

}  // namespace simipu
