#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "simipu/checkpoint.hpp"
#include "simipu/dataio.hpp"
#include "simipu/encoders.hpp"
#include "simipu/error.hpp"
#include "simipu/geometry.hpp"
#include "simipu/losses.hpp"
#include "simipu/matching.hpp"
#include "simipu/optim.hpp"
#include "simipu/train_state.hpp"

namespace simipu {

struct TrainConfig {
  EncoderConfig encoder;
  TransformRanges transforms;
  LossWeights weights;
  Reduction reduction = Reduction::kMean;
  AssignAlgorithm algorithm = AssignAlgorithm::kHungarian;
  std::size_t pair_cap = 4096;
  HybridOptimConfig optim;
  std::size_t batch_size = 4;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 50;  ///< 0 = final checkpoint only
  std::size_t smoothing_window = 10;
  double min_depth = kDefaultMinDepth;
  /// Check after every step that L_inter left the point branch untouched
  /// and that every parameter sits in the partition its name claims.
  bool debug_checks = false;

  void validate() const {
    encoder.validate();
    transforms.validate();
    weights.validate();
    optim.validate();
    if (pair_cap < 2) throw ConfigError("pair cap must be at least 2");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (smoothing_window == 0) throw ConfigError("smoothing window must be positive");
    if (!(min_depth > 0.0)) throw ConfigError("minimum projection depth must be positive");
  }
};

/// A scene reduced to what training reads: the FOV-filtered cloud and the
/// image in the training precision.
template <class T>
struct PreparedScene {
  PointCloud cloud;
  diff::Var<T> image;
  CameraModel camera;
  std::uint64_t seed = 0;
};

struct PrepareReport {
  std::size_t kept = 0;
  std::size_t dropped_empty_fov = 0;
};

/// FOV-filter every scene. Scenes with nothing in view, or fewer points
/// than the encoder's final stage, are dropped and counted; a dataset left
/// empty is a configuration error.
template <class T>
std::vector<PreparedScene<T>> prepare_scenes(const std::vector<SyntheticScene>& scenes, const TrainConfig& config,
                                             PrepareReport* report = nullptr) {
  std::vector<PreparedScene<T>> out;
  PrepareReport rep;
  for (const auto& s : scenes) {
    auto filtered = fov_filter(s.cloud, s.camera, config.min_depth);
    if (!filtered || filtered->size() < config.encoder.point_stages.back().points) {
      ++rep.dropped_empty_fov;
      continue;
    }
    out.push_back({std::move(*filtered), diff::Var<T>::constant(s.image.cast<T>()), s.camera, s.seed});
  }
  rep.kept = out.size();
  if (report) *report = rep;
  if (out.empty()) throw ConfigError("dataset has no scene with enough points inside the camera view");
  return out;
}

namespace detail {

struct SimilarityStats {
  double pos_sum = 0.0, neg_sum = 0.0;
  std::size_t pos_count = 0, neg_count = 0;
};

/// Cosine similarity of matched pairs and of every mismatched (query,
/// matched key) combination.
template <class T>
void accumulate_similarity(const Tensor<T>& q, const Tensor<T>& k, const MatchSet& m, SimilarityStats& s) {
  const std::size_t d = q.row_size();
  auto norm = [d](const Tensor<T>& x, std::size_t r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += static_cast<double>(x(r, c)) * static_cast<double>(x(r, c));
    return std::max(std::sqrt(ss), 1e-12);
  };
  std::vector<double> qn, kn;
  for (const auto& [qi, ki] : m.pairs) {
    qn.push_back(norm(q, qi));
    kn.push_back(norm(k, ki));
  }
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = 0; b < m.size(); ++b) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c)
        dot += static_cast<double>(q(m.pairs[a].first, c)) * static_cast<double>(k(m.pairs[b].second, c));
      const double cos = dot / (qn[a] * kn[b]);
      if (a == b) {
        s.pos_sum += cos;
        ++s.pos_count;
      } else {
        s.neg_sum += cos;
        ++s.neg_count;
      }
    }
}

template <class T>
std::vector<Tensor<T>> snapshot_grads(const std::vector<ParamEntry<T>>& registry, Branch branch) {
  std::vector<Tensor<T>> out;
  for (const auto& e : registry)
    if (e.branch == branch) out.push_back(e.var.grad());
  return out;
}

}  // namespace detail

/// One optimizer step over `batch`. Per scene: draw T, encode both views,
/// match them (M1) and the view-alpha points against the image (M2), and
/// form both contrastive losses. Each loss is averaged over the scenes that
/// produced it, gradients are accumulated, and the hybrid rule updates
/// both partitions. No scene with inter matches means no update.
template <class T>
StepMetrics train_step(TrainState<T>& state, const std::vector<const PreparedScene<T>*>& batch, const TrainConfig& config) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  const auto registry = state.params.registry();
  zero_grads(registry);
  const InfoNceOptions nce{config.weights.temperature, config.reduction, config.encoder.normalize_embeddings};

  std::vector<diff::Var<T>> intra_losses, inter_losses;
  std::vector<std::uint64_t> intra_seeds, inter_seeds;
  StepMetrics m;
  detail::SimilarityStats sims;
  std::size_t intra_pairs = 0, inter_pairs = 0;

  for (const PreparedScene<T>* scene : batch) {
    Rng rng = state.rng.split();
    const SimilarityTransform t = sample_transform(rng, config.transforms);
    const PointCloud beta_cloud = apply_transform(scene->cloud, t);
    const auto alpha = encode_points(scene->cloud, state.params, config.encoder, rng);
    const auto beta = encode_points(beta_cloud, state.params, config.encoder, rng);
    const auto ea = project_head(alpha.features, state.params.point_head, config.encoder.normalize_embeddings);
    const auto eb = project_head(beta.features, state.params.point_head, config.encoder.normalize_embeddings);

    const MatchSet m1 = build_intra_matches(alpha, beta, t, config.algorithm, config.pair_cap);
    if (m1.size() >= 2) {
      intra_losses.push_back(intra_loss(ea, eb, m1, nce));
      intra_seeds.push_back(scene->seed);
      intra_pairs += m1.size();
      detail::accumulate_similarity(ea.value(), eb.value(), m1, sims);
    }

    const auto fmap = encode_image(scene->image, state.params, config.encoder, diff::NormMode::kBatch, true);
    auto inter = build_inter_matches(alpha.locations, scene->camera, fmap, config.pair_cap, rng, config.min_depth);
    if (inter && inter->matches.size() >= 2) {
      const auto eg = project_head(inter->sampled, state.params.image_head, config.encoder.normalize_embeddings);
      inter_losses.push_back(inter_loss(ea, eg, inter->matches, nce));
      inter_seeds.push_back(scene->seed);
      inter_pairs += inter->matches.size();
    }
  }

  auto check_finite = [](const std::vector<diff::Var<T>>& losses, const std::vector<std::uint64_t>& seeds, const char* what) {
    for (std::size_t i = 0; i < losses.size(); ++i)
      if (!std::isfinite(static_cast<double>(losses[i].value()[0]))) {
        throw NumericError(std::string("non-finite ") + what + " loss on scene seed " + std::to_string(seeds[i]));
      }
  };
  check_finite(intra_losses, intra_seeds, "intra");
  check_finite(inter_losses, inter_seeds, "inter");

  const auto mean_value = [](const std::vector<diff::Var<T>>& v) {
    double s = 0.0;
    for (const auto& l : v) s += static_cast<double>(l.value()[0]);
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  m.l_intra = mean_value(intra_losses);
  m.l_inter = mean_value(inter_losses);
  m.l_total = config.weights.lambda_intra * m.l_intra + config.weights.mu_inter * m.l_inter;
  const double scenes = static_cast<double>(batch.size());
  m.matched_intra = static_cast<std::size_t>(std::lround(static_cast<double>(intra_pairs) / scenes));
  m.matched_inter = static_cast<std::size_t>(std::lround(static_cast<double>(inter_pairs) / scenes));
  m.mean_pos_sim = sims.pos_count ? sims.pos_sum / static_cast<double>(sims.pos_count) : 0.0;
  m.mean_neg_sim = sims.neg_count ? sims.neg_sum / static_cast<double>(sims.neg_count) : 0.0;

  if (inter_losses.empty()) {
    m.skipped = true;
    m.skip_reason = "no scene in the batch produced inter-modal matches";
    return m;
  }

  // Inter first, so the debug check sees its contribution in isolation.
  const auto before = config.debug_checks ? detail::snapshot_grads(registry, Branch::kPoint) : std::vector<Tensor<T>>{};
  const T inter_scale = static_cast<T>(config.weights.mu_inter / static_cast<double>(inter_losses.size()));
  for (const auto& l : inter_losses) diff::backward(diff::scale(l, inter_scale));
  if (config.debug_checks) {
    if (detail::snapshot_grads(registry, Branch::kPoint) != before) {
      throw NumericError("inter-modal loss leaked gradient into the point branch");
    }
    for (const auto& e : registry)
      if (branch_of(e.name) != e.branch) throw ConfigError("parameter " + e.name + " sits in the wrong partition");
  }
  if (!intra_losses.empty()) {
    const T intra_scale = static_cast<T>(config.weights.lambda_intra / static_cast<double>(intra_losses.size()));
    for (const auto& l : intra_losses) diff::backward(diff::scale(l, intra_scale));
  }

  m.grad_norm_image = grad_norm(registry, Branch::kImage);
  m.grad_norm_point = grad_norm(registry, Branch::kPoint);
  hybrid_update(registry, state.optim, config.optim);
  return m;
}

/// Draw a batch without replacement (with replacement only when the
/// dataset is smaller than the batch).
template <class T>
std::vector<const PreparedScene<T>*> draw_batch(const std::vector<PreparedScene<T>>& scenes, std::size_t batch_size, Rng& rng) {
  std::vector<const PreparedScene<T>*> out;
  if (scenes.size() < batch_size) {
    for (std::size_t i = 0; i < batch_size; ++i) out.push_back(&scenes[static_cast<std::size_t>(rng.below(scenes.size()))]);
    return out;
  }
  std::vector<std::size_t> idx(scenes.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < batch_size; ++i) {
    std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(idx.size() - i))]);
    out.push_back(&scenes[idx[i]]);
  }
  return out;
}

/// Batch draw, train_step, bookkeeping.
template <class T>
StepMetrics advance(TrainState<T>& state, const std::vector<PreparedScene<T>>& scenes, const TrainConfig& config) {
  const auto batch = draw_batch(scenes, config.batch_size, state.rng);
  StepMetrics m = train_step(state, batch, config);
  ++state.step;
  state.history.push(m);
  return m;
}

struct PretrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> warm_start;  ///< image-branch weights only
  std::optional<std::filesystem::path> resume;      ///< full state
  std::string config_digest;
  /// Record wall_ms as 0 so metrics files are byte-reproducible.
  bool deterministic = false;
  std::function<void(const std::string&)> log;
};

struct SmoothedLosses {
  double l_intra = 0.0, l_inter = 0.0;
  double l_intra_first = 0.0, l_inter_first = 0.0;
  double pos_sim = 0.0, neg_sim = 0.0;
};

inline SmoothedLosses smoothed(const MetricHistory& h, std::size_t window) {
  SmoothedLosses s;
  if (h.l_intra.empty()) return s;
  s.l_intra = MetricHistory::trailing_mean(h.l_intra, window);
  s.l_inter = MetricHistory::trailing_mean(h.l_inter, window);
  s.l_intra_first = h.l_intra.front();
  s.l_inter_first = h.l_inter.front();
  s.pos_sim = MetricHistory::trailing_mean(h.pos_sim, window);
  s.neg_sim = MetricHistory::trailing_mean(h.neg_sim, window);
  return s;
}

template <class T>
struct PretrainResult {
  TrainState<T> state;
  SmoothedLosses final_losses;
  std::size_t skipped_steps = 0;
  std::filesystem::path checkpoint;
};

inline std::string checkpoint_name(std::uint64_t step) {
  std::ostringstream os;
  os << "ckpt_step_" << std::setw(6) << std::setfill('0') << step << ".sipu";
  return os.str();
}

/// Keep the metrics records up to and including `step`.
inline void truncate_metrics(const std::filesystem::path& path, std::uint64_t step) {
  std::string kept;
  if (std::filesystem::exists(path)) {
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line, nullptr, false);
      if (rec.is_discarded()) throw FormatError("metrics file " + path.string() + " has a malformed line");
      if (rec.at("step").get<std::uint64_t>() <= step) kept += line + "\n";
    }
  }
  write_file(path, kept);
}

/// Train until state.step reaches config.steps, writing metrics.jsonl and
/// checkpoints into options.out_dir.
template <class T>
PretrainResult<T> pretrain(const TrainConfig& config, const std::vector<SyntheticScene>& dataset, const PretrainOptions& options) {
  config.validate();
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  PrepareReport prep;
  const auto scenes = prepare_scenes<T>(dataset, config, &prep);
  if (prep.dropped_empty_fov) log("dropped " + std::to_string(prep.dropped_empty_fov) + " scenes without usable points in view");

  PretrainResult<T> result;
  result.state = init_train_state<T>(config.encoder, config.seed);
  auto& state = result.state;
  if (options.resume) {
    load_checkpoint(read_file(*options.resume), state);
    log("resumed from " + options.resume->string() + " at step " + std::to_string(state.step));
  } else if (options.warm_start) {
    const auto loaded = load_checkpoint_prefix(read_file(*options.warm_start), state, branch_prefix(Branch::kImage));
    log("warm start: loaded " + std::to_string(loaded.size()) + " image-branch tensors from " + options.warm_start->string());
    log("warm start: point branch uses fresh initialization (seed " + std::to_string(config.seed) + ")");
  }

  std::error_code ec;
  std::filesystem::create_directories(options.out_dir, ec);
  if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());
  const auto metrics_path = options.out_dir / "metrics.jsonl";
  truncate_metrics(metrics_path, options.resume ? state.step : 0);
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());

  const CheckpointOptions ckpt_opts{"", options.config_digest};
  while (state.step < config.steps) {
    const auto t0 = std::chrono::steady_clock::now();
    const StepMetrics m = advance(state, scenes, config);
    const double wall_ms =
        options.deterministic ? 0.0 : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics << metrics_record(state.step, m, wall_ms).dump() << '\n';
    metrics.flush();
    if (!metrics) throw IoError("cannot write " + metrics_path.string());
    if (m.skipped) {
      ++result.skipped_steps;
      log("step " + std::to_string(state.step) + " skipped: " + m.skip_reason);
    } else if (state.step == 1 || state.step % 10 == 0 || state.step == config.steps) {
      std::ostringstream os;
      os << "step " << state.step << "/" << config.steps << " l_intra " << m.l_intra << " l_inter " << m.l_inter
         << " pos " << m.mean_pos_sim << " neg " << m.mean_neg_sim;
      log(os.str());
    }
    if (config.checkpoint_every && state.step % config.checkpoint_every == 0 && state.step < config.steps) {
      write_file(options.out_dir / checkpoint_name(state.step), save_checkpoint(state, ckpt_opts));
    }
  }
  result.checkpoint = options.out_dir / "checkpoint.sipu";
  write_file(result.checkpoint, save_checkpoint(state, ckpt_opts));
  result.final_losses = smoothed(state.history, config.smoothing_window);
  return result;
}

struct SweepEntry {
  std::size_t scenes = 0;
  std::filesystem::path metrics;
  SmoothedLosses final_losses;
};

/// Data-scale sweep: one pretraining run per dataset size, each in
/// out_dir/scenes_<N> with its own metrics file. Datasets are generated
/// from consecutive seeds starting at data_seed, so smaller sets are
/// prefixes of larger ones.
template <class T>
std::vector<SweepEntry> data_scale_sweep(const TrainConfig& config, const SceneConfig& scene_config, std::uint64_t data_seed,
                                         const std::vector<std::size_t>& sizes, const PretrainOptions& options) {
  std::vector<SweepEntry> out;
  std::size_t largest = 0;
  for (auto s : sizes) largest = std::max(largest, s);
  std::vector<SyntheticScene> all;
  for (std::size_t i = 0; i < largest; ++i) all.push_back(generate_scene(data_seed + i, scene_config));
  for (std::size_t size : sizes) {
    if (size == 0) throw ConfigError("sweep sizes must be positive");
    PretrainOptions opts = options;
    opts.out_dir = options.out_dir / ("scenes_" + std::to_string(size));
    opts.resume.reset();
    const std::vector<SyntheticScene> subset(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(size));
    auto r = pretrain<T>(config, subset, opts);
    out.push_back({size, opts.out_dir / "metrics.jsonl", r.final_losses});
  }
  return out;
}

}  // namespace simipu
