#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "simipu/encoders.hpp"
#include "simipu/optim.hpp"
#include "simipu/rng.hpp"

namespace simipu {

struct StepMetrics {
  double l_intra = 0.0;
  double l_inter = 0.0;
  double l_total = 0.0;
  std::size_t matched_intra = 0;  ///< per scene, batch mean
  std::size_t matched_inter = 0;  ///< per scene, batch mean
  double mean_pos_sim = 0.0;      ///< cosine of matched intra pairs
  double mean_neg_sim = 0.0;      ///< cosine of mismatched intra pairs
  double grad_norm_image = 0.0;
  double grad_norm_point = 0.0;

  bool skipped = false;  ///< no optimizer update happened (not serialized)
  std::string skip_reason;
};

/// One metrics record: the StepMetrics fields plus step and wall_ms.
inline nlohmann::ordered_json metrics_record(std::uint64_t step, const StepMetrics& m, double wall_ms) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["l_intra"] = m.l_intra;
  j["l_inter"] = m.l_inter;
  j["l_total"] = m.l_total;
  j["matched_intra"] = m.matched_intra;
  j["matched_inter"] = m.matched_inter;
  j["mean_pos_sim"] = m.mean_pos_sim;
  j["mean_neg_sim"] = m.mean_neg_sim;
  j["grad_norm_image"] = m.grad_norm_image;
  j["grad_norm_point"] = m.grad_norm_point;
  j["wall_ms"] = wall_ms;
  return j;
}

/// Per-step loss/similarity series kept for smoothing.
struct MetricHistory {
  std::vector<double> l_intra, l_inter, pos_sim, neg_sim;

  void push(const StepMetrics& m) {
    l_intra.push_back(m.l_intra);
    l_inter.push_back(m.l_inter);
    pos_sim.push_back(m.mean_pos_sim);
    neg_sim.push_back(m.mean_neg_sim);
  }

  static double trailing_mean(const std::vector<double>& v, std::size_t window) {
    if (v.empty()) return 0.0;
    const std::size_t n = std::min(window == 0 ? v.size() : window, v.size());
    double s = 0.0;
    for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
    return s / static_cast<double>(n);
  }

  nlohmann::json to_json() const {
    return {{"l_intra", l_intra}, {"l_inter", l_inter}, {"pos_sim", pos_sim}, {"neg_sim", neg_sim}};
  }

  static MetricHistory from_json(const nlohmann::json& j) {
    MetricHistory h;
    h.l_intra = j.at("l_intra").get<std::vector<double>>();
    h.l_inter = j.at("l_inter").get<std::vector<double>>();
    h.pos_sim = j.at("pos_sim").get<std::vector<double>>();
    h.neg_sim = j.at("neg_sim").get<std::vector<double>>();
    return h;
  }
};

/// Everything needed to continue training bit-for-bit.
template <class T>
struct TrainState {
  std::uint64_t step = 0;
  EncoderParams<T> params;
  OptimizerState<T> optim;
  Rng rng;
  MetricHistory history;
};

/// Parameters from a seeded child stream; the state keeps the parent.
template <class T>
TrainState<T> init_train_state(const EncoderConfig& config, std::uint64_t seed) {
  TrainState<T> s;
  Rng master(seed);
  Rng init = master.split();
  s.params = init_params<T>(config, init);
  s.optim = OptimizerState<T>::zeros(s.params.registry());
  s.rng = master;
  return s;
}

}  // namespace simipu
