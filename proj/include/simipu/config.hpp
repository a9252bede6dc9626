#pragma once

// Run configuration: "key = value" lines grouped under [section] headers,
// '#' or ';' starts a comment. Every key has a fixed type and default;
// unknown sections or keys are errors. The digest hashes the canonical
// rendering of all values, so comments, spacing and ordering do not affect
// it.

#include <charconv>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "simipu/dataio.hpp"
#include "simipu/error.hpp"
#include "simipu/probe.hpp"
#include "simipu/trainer.hpp"

namespace simipu {

struct RunConfig {
  SceneConfig scene;
  TrainConfig train;
  ProbeConfig probe;
  std::size_t data_scenes = 64;
  std::uint64_t data_seed = 1000;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class U>
U parse_number(std::string_view text, const std::string& key) {
  U v{};
  const auto t = trim(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("config key " + key + ": '" + std::string(t) + "' is not a valid number");
  }
  return v;
}

inline bool parse_bool(std::string_view text, const std::string& key) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError("config key " + key + ": '" + std::string(t) + "' is not a boolean");
}

template <class U>
std::vector<U> parse_list(std::string_view text, const std::string& key) {
  std::vector<U> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    out.push_back(parse_number<U>(item, key));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

template <class U>
std::string format_list(const std::vector<U>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<U>) {
      s += format_double(v[i]);
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

struct KeySpec {
  std::function<void(RunConfig&, std::string_view, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class U>
KeySpec number_key(std::function<U&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, std::string_view v, const std::string& key) { ref(c) = parse_number<U>(v, key); },
          [ref](const RunConfig& c) {
            const U& v = ref(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<U>) {
              return format_double(v);
            } else {
              return std::to_string(v);
            }
          }};
}

inline KeySpec bool_key(std::function<bool&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, std::string_view v, const std::string& key) { ref(c) = parse_bool(v, key); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class E>
KeySpec enum_key(std::function<E&(RunConfig&)> ref, std::vector<std::pair<std::string, E>> names) {
  return {[ref, names](RunConfig& c, std::string_view v, const std::string& key) {
            const auto t = trim(v);
            for (const auto& [n, e] : names)
              if (t == n) {
                ref(c) = e;
                return;
              }
            std::string options;
            for (const auto& [n, e] : names) options += (options.empty() ? "" : "|") + n;
            throw ConfigError("config key " + key + ": '" + std::string(t) + "' is not one of " + options);
          },
          [ref, names](const RunConfig& c) {
            for (const auto& [n, e] : names)
              if (ref(const_cast<RunConfig&>(c)) == e) return n;
            return std::string("?");
          }};
}

/// Per-stage point-encoder fields are exposed as comma lists.
template <class U>
KeySpec stage_list_key(U PointStageConfig::*field) {
  return {[field](RunConfig& c, std::string_view v, const std::string& key) {
            const auto values = parse_list<U>(v, key);
            auto& stages = c.train.encoder.point_stages;
            if (values.size() != stages.size()) {
              bool resizable = false;
              if constexpr (std::is_same_v<U, std::size_t>) resizable = field == &PointStageConfig::points;
              if (!resizable) {
                throw ConfigError("config key " + key + " lists " + std::to_string(values.size()) + " stages, encoder has " +
                                  std::to_string(stages.size()) + " (set encoder.stage_points first)");
              }
              stages.resize(values.size(), stages.back());
            }
            for (std::size_t i = 0; i < values.size(); ++i) stages[i].*field = values[i];
          },
          [field](const RunConfig& c) {
            std::vector<U> values;
            for (const auto& st : c.train.encoder.point_stages) values.push_back(st.*field);
            return format_list(values);
          }};
}

inline const std::map<std::string, KeySpec>& schema() {
  static const std::map<std::string, KeySpec> keys = [] {
    std::map<std::string, KeySpec> k;
    using C = RunConfig;
    k["scene.image_width"] = number_key<int>([](C& c) -> int& { return c.scene.image_width; });
    k["scene.image_height"] = number_key<int>([](C& c) -> int& { return c.scene.image_height; });
    k["scene.fx"] = number_key<double>([](C& c) -> double& { return c.scene.fx; });
    k["scene.fy"] = number_key<double>([](C& c) -> double& { return c.scene.fy; });
    k["scene.cx"] = number_key<double>([](C& c) -> double& { return c.scene.cx; });
    k["scene.cy"] = number_key<double>([](C& c) -> double& { return c.scene.cy; });
    k["scene.points"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.scene.points; });
    k["scene.min_boxes"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.scene.min_boxes; });
    k["scene.max_boxes"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.scene.max_boxes; });
    k["scene.noise_sigma"] = number_key<double>([](C& c) -> double& { return c.scene.noise_sigma; });
    k["scene.sensor_height"] = number_key<double>([](C& c) -> double& { return c.scene.sensor_height; });
    k["scene.ground_range"] = number_key<double>([](C& c) -> double& { return c.scene.ground_range; });
    k["scene.ground_half_width"] = number_key<double>([](C& c) -> double& { return c.scene.ground_half_width; });
    k["scene.box_min_distance"] = number_key<double>([](C& c) -> double& { return c.scene.box_min_distance; });
    k["scene.box_max_distance"] = number_key<double>([](C& c) -> double& { return c.scene.box_max_distance; });
    k["scene.noise_images"] = bool_key([](C& c) -> bool& { return c.scene.noise_images; });

    k["data.scenes"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.data_scenes; });
    k["data.seed"] = number_key<std::uint64_t>([](C& c) -> std::uint64_t& { return c.data_seed; });

    k["encoder.stage_points"] = stage_list_key(&PointStageConfig::points);
    k["encoder.stage_widths"] = stage_list_key(&PointStageConfig::width);
    k["encoder.stage_radii"] = stage_list_key(&PointStageConfig::radius);
    k["encoder.stage_max_neighbors"] = stage_list_key(&PointStageConfig::max_neighbors);
    k["encoder.mlp_layers_per_stage"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.encoder.mlp_layers_per_stage; });
    k["encoder.image_channels"] = {
        [](C& c, std::string_view v, const std::string& key) { c.train.encoder.image_channels = parse_list<std::size_t>(v, key); },
        [](const C& c) { return format_list(c.train.encoder.image_channels); }};
    k["encoder.convs_per_stage"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.encoder.convs_per_stage; });
    k["encoder.embedding_dim"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.encoder.embedding_dim; });
    k["encoder.normalize_embeddings"] = bool_key([](C& c) -> bool& { return c.train.encoder.normalize_embeddings; });

    k["transform.yaw_min"] = number_key<double>([](C& c) -> double& { return c.train.transforms.yaw_min; });
    k["transform.yaw_max"] = number_key<double>([](C& c) -> double& { return c.train.transforms.yaw_max; });
    const char* axes[] = {"x", "y", "z"};
    for (int a = 0; a < 3; ++a) {
      k[std::string("transform.translation_min_") + axes[a]] =
          number_key<double>([a](C& c) -> double& { return c.train.transforms.translation_min[static_cast<std::size_t>(a)]; });
      k[std::string("transform.translation_max_") + axes[a]] =
          number_key<double>([a](C& c) -> double& { return c.train.transforms.translation_max[static_cast<std::size_t>(a)]; });
    }
    k["transform.scale_min"] = number_key<double>([](C& c) -> double& { return c.train.transforms.scale_min; });
    k["transform.scale_max"] = number_key<double>([](C& c) -> double& { return c.train.transforms.scale_max; });

    k["loss.lambda_intra"] = number_key<double>([](C& c) -> double& { return c.train.weights.lambda_intra; });
    k["loss.mu_inter"] = number_key<double>([](C& c) -> double& { return c.train.weights.mu_inter; });
    k["loss.temperature"] = number_key<double>([](C& c) -> double& { return c.train.weights.temperature; });
    k["loss.reduction"] = enum_key<Reduction>([](C& c) -> Reduction& { return c.train.reduction; },
                                              {{"mean", Reduction::kMean}, {"sum", Reduction::kSum}});

    k["matching.algorithm"] = enum_key<AssignAlgorithm>(
        [](C& c) -> AssignAlgorithm& { return c.train.algorithm; },
        {{"hungarian", AssignAlgorithm::kHungarian}, {"greedy", AssignAlgorithm::kGreedy}});
    k["matching.pair_cap"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.pair_cap; });
    k["matching.min_depth"] = number_key<double>([](C& c) -> double& { return c.train.min_depth; });

    k["optim.image_lr"] = number_key<double>([](C& c) -> double& { return c.train.optim.image.lr; });
    k["optim.image_momentum"] = number_key<double>([](C& c) -> double& { return c.train.optim.image.momentum; });
    k["optim.image_weight_decay"] = number_key<double>([](C& c) -> double& { return c.train.optim.image.weight_decay; });
    k["optim.point_lr"] = number_key<double>([](C& c) -> double& { return c.train.optim.point.lr; });
    k["optim.point_beta1"] = number_key<double>([](C& c) -> double& { return c.train.optim.point.beta1; });
    k["optim.point_beta2"] = number_key<double>([](C& c) -> double& { return c.train.optim.point.beta2; });
    k["optim.point_weight_decay"] = number_key<double>([](C& c) -> double& { return c.train.optim.point.weight_decay; });
    k["optim.point_eps"] = number_key<double>([](C& c) -> double& { return c.train.optim.point.eps; });

    k["train.batch_size"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.batch_size; });
    k["train.steps"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.steps; });
    k["train.seed"] = number_key<std::uint64_t>([](C& c) -> std::uint64_t& { return c.train.seed; });
    k["train.checkpoint_every"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.checkpoint_every; });
    k["train.smoothing_window"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.train.smoothing_window; });
    k["train.debug_checks"] = bool_key([](C& c) -> bool& { return c.train.debug_checks; });

    k["probe.pixels_per_scene"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.probe.pixels_per_scene; });
    k["probe.epochs"] = number_key<std::size_t>([](C& c) -> std::size_t& { return c.probe.epochs; });
    k["probe.lr"] = number_key<double>([](C& c) -> double& { return c.probe.lr; });
    k["probe.holdout_fraction"] = number_key<double>([](C& c) -> double& { return c.probe.holdout_fraction; });
    k["probe.seed"] = number_key<std::uint64_t>([](C& c) -> std::uint64_t& { return c.probe.seed; });
    k["probe.si_variance_weight"] = number_key<double>([](C& c) -> double& { return c.probe.si.variance_weight; });
    k["probe.si_scale"] = number_key<double>([](C& c) -> double& { return c.probe.si.scale; });
    k["probe.si_form"] = enum_key<SiLossForm>([](C& c) -> SiLossForm& { return c.probe.si.form; },
                                              {{"variance", SiLossForm::kVariance}, {"as_printed", SiLossForm::kAsPrinted}});
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Parse config text on top of the defaults. Every value is checked by the
/// owning module's validate() afterwards.
inline RunConfig parse_run_config(std::string_view text) {
  RunConfig config;
  const auto& keys = detail::schema();
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  std::map<std::string, std::size_t> seen;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (const auto c = line.find_first_of("#;"); c != std::string_view::npos) line = line.substr(0, c);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      bool known = false;
      for (const auto& [name, spec] : keys) known = known || name.rfind(section + ".", 0) == 0;
      if (!known) throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": key outside any [section]");
    const std::string key = section + "." + std::string(detail::trim(line.substr(0, eq)));
    const auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key " + key);
    if (seen.count(key)) {
      throw ConfigError("config line " + std::to_string(line_no) + ": key " + key + " already set on line " +
                        std::to_string(seen[key]));
    }
    seen[key] = line_no;
    it->second.set(config, line.substr(eq + 1), key);
  }
  config.scene.validate();
  config.train.validate();
  config.probe.validate();
  return config;
}

/// Every key with its current value, grouped by section, in schema order.
inline std::string render_run_config(const RunConfig& config) {
  std::string out, section;
  for (const auto& [name, spec] : detail::schema()) {
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += name.substr(dot + 1) + " = " + spec.get(config) + "\n";
  }
  return out;
}

/// 64-bit FNV-1a of the canonical rendering, as 16 hex digits.
inline std::string config_digest(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : render_run_config(config)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace simipu
