#pragma once

// Checkpoint layout (all integers and floats little-endian):
//
//   "SIPU" | u32 version | u64 manifest length | manifest (JSON text)
//   | tensor payloads in manifest "entries" order
//   | moment payloads in manifest "moments" order
//   | u64 rng length | rng state text
//
// The manifest records the dtype, step, names and shapes. Entries cover
// parameters and running-statistics buffers; a partial load selects entries
// by name prefix.

#include <cstdint>
#include <bit>
#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "simipu/dataio.hpp"
#include "simipu/error.hpp"
#include "simipu/train_state.hpp"

namespace simipu {

inline constexpr char kCheckpointMagic[4] = {'S', 'I', 'P', 'U'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint is truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <class U>
  U le() {
    const auto raw = take(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i])) << (8 * i);
    return static_cast<U>(v);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <class T>
void put_tensor(std::string& out, const Tensor<T>& t) {
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) {
      put_le(out, std::bit_cast<std::uint32_t>(v));
    } else {
      put_le(out, std::bit_cast<std::uint64_t>(v));
    }
  }
}

template <class T>
Tensor<T> get_tensor(Reader& in, const Shape& shape, const std::string& dtype) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) {
    if (dtype == "f32") {
      v = static_cast<T>(std::bit_cast<float>(in.le<std::uint32_t>()));
    } else if (dtype == "f64") {
      v = static_cast<T>(std::bit_cast<double>(in.le<std::uint64_t>()));
    } else {
      throw FormatError("checkpoint dtype '" + dtype + "' is not supported");
    }
  }
  return t;
}

}  // namespace detail

struct CheckpointOptions {
  /// Only entries whose name starts with this prefix are written; moments
  /// follow their parameters.
  std::string prefix;
  std::string config_digest;
};

template <class T>
std::string save_checkpoint(TrainState<T>& state, const CheckpointOptions& options = {}) {
  const auto registry = state.params.registry();
  auto buffers = state.params.buffers();
  auto keep = [&](const std::string& name) { return name.rfind(options.prefix, 0) == 0; };

  nlohmann::ordered_json manifest;
  manifest["dtype"] = dtype_name<T>();
  manifest["step"] = state.step;
  manifest["config_digest"] = options.config_digest;
  manifest["adam_steps"] = state.optim.adam_steps;
  manifest["history"] = state.history.to_json();
  manifest["entries"] = nlohmann::json::array();
  manifest["moments"] = nlohmann::json::array();

  std::string payload;
  for (const auto& e : registry) {
    if (!keep(e.name)) continue;
    manifest["entries"].push_back({{"name", e.name}, {"shape", e.var.shape()}, {"kind", "param"}});
    detail::put_tensor(payload, e.var.value());
  }
  for (const auto& b : buffers) {
    if (!keep(b.name)) continue;
    manifest["entries"].push_back({{"name", b.name}, {"shape", b.tensor->shape()}, {"kind", "buffer"}});
    detail::put_tensor(payload, *b.tensor);
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto& e = registry[i];
    if (!keep(e.name)) continue;
    manifest["moments"].push_back({{"name", OptimizerState<T>::first_name(e)}, {"shape", e.var.shape()}});
    detail::put_tensor(payload, state.optim.first[i]);
    if (e.branch == Branch::kPoint) {
      manifest["moments"].push_back({{"name", OptimizerState<T>::second_name(e)}, {"shape", e.var.shape()}});
      detail::put_tensor(payload, state.optim.second[i]);
    }
  }

  const std::string manifest_text = manifest.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(manifest_text.size()));
  out += manifest_text;
  out += payload;
  const std::string rng_text = state.rng.serialize();
  detail::put_le(out, static_cast<std::uint64_t>(rng_text.size()));
  out += rng_text;
  return out;
}

/// Decoded checkpoint contents, independent of any live TrainState.
template <class T>
struct CheckpointData {
  nlohmann::json manifest;
  std::map<std::string, Tensor<T>> tensors;  ///< params and buffers
  std::map<std::string, Tensor<T>> moments;
  std::string rng_text;

  std::uint64_t step() const { return manifest.at("step").template get<std::uint64_t>(); }
};

template <class T>
CheckpointData<T> read_checkpoint(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.le<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto manifest_len = in.le<std::uint64_t>();
  CheckpointData<T> data;
  try {
    data.manifest = nlohmann::json::parse(in.take(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  const std::string dtype = data.manifest.at("dtype").template get<std::string>();
  for (const auto& e : data.manifest.at("entries")) {
    data.tensors[e.at("name").template get<std::string>()] = detail::get_tensor<T>(in, e.at("shape").template get<Shape>(), dtype);
  }
  for (const auto& e : data.manifest.at("moments")) {
    data.moments[e.at("name").template get<std::string>()] = detail::get_tensor<T>(in, e.at("shape").template get<Shape>(), dtype);
  }
  const auto rng_len = in.le<std::uint64_t>();
  data.rng_text = std::string(in.take(rng_len));
  if (in.remaining() != 0) throw FormatError("checkpoint has trailing bytes");
  return data;
}

namespace detail {

template <class T>
void assign_checked(Tensor<T>& dst, const Tensor<T>& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw ConfigError("checkpoint entry " + name + " has shape " + shape_string(src.shape()) + ", model expects " +
                      shape_string(dst.shape()));
  }
  dst = src;
}

}  // namespace detail

/// Restore every parameter, buffer, moment, the rng and the step counter.
template <class T>
void load_checkpoint(std::string_view bytes, TrainState<T>& state) {
  const auto data = read_checkpoint<T>(bytes);
  const auto registry = state.params.registry();
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto& e = registry[i];
    auto it = data.tensors.find(e.name);
    if (it == data.tensors.end()) throw ConfigError("checkpoint lacks parameter " + e.name);
    diff::Var<T> v = e.var;
    detail::assign_checked(v.mutable_value(), it->second, e.name);
    auto m = data.moments.find(OptimizerState<T>::first_name(e));
    if (m == data.moments.end()) throw ConfigError("checkpoint lacks optimizer moments for " + e.name);
    detail::assign_checked(state.optim.first[i], m->second, e.name);
    if (e.branch == Branch::kPoint) {
      auto m2 = data.moments.find(OptimizerState<T>::second_name(e));
      if (m2 == data.moments.end()) throw ConfigError("checkpoint lacks optimizer moments for " + e.name);
      detail::assign_checked(state.optim.second[i], m2->second, e.name);
    }
  }
  for (auto& b : state.params.buffers()) {
    auto it = data.tensors.find(b.name);
    if (it == data.tensors.end()) throw ConfigError("checkpoint lacks buffer " + b.name);
    detail::assign_checked(*b.tensor, it->second, b.name);
  }
  state.step = data.step();
  state.optim.adam_steps = data.manifest.at("adam_steps").template get<std::uint64_t>();
  state.history = MetricHistory::from_json(data.manifest.at("history"));
  state.rng = Rng::deserialize(data.rng_text);
}

/// Copy the parameters and buffers under `prefix` (weights only, no
/// moments or step). Every model entry under the prefix must be present.
/// Returns the names loaded.
template <class T>
std::vector<std::string> load_checkpoint_prefix(std::string_view bytes, TrainState<T>& state, const std::string& prefix) {
  const auto data = read_checkpoint<T>(bytes);
  bool any = false;
  for (const auto& [name, t] : data.tensors) any = any || name.rfind(prefix, 0) == 0;
  if (!any) throw ConfigError("checkpoint has no entries under manifest prefix '" + prefix + "'");
  std::vector<std::string> loaded;
  for (const auto& e : state.params.registry()) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    auto it = data.tensors.find(e.name);
    if (it == data.tensors.end()) throw ConfigError("checkpoint lacks " + e.name + " under manifest prefix '" + prefix + "'");
    diff::Var<T> v = e.var;
    detail::assign_checked(v.mutable_value(), it->second, e.name);
    loaded.push_back(e.name);
  }
  for (auto& b : state.params.buffers()) {
    if (b.name.rfind(prefix, 0) != 0) continue;
    auto it = data.tensors.find(b.name);
    if (it == data.tensors.end()) throw ConfigError("checkpoint lacks " + b.name + " under manifest prefix '" + prefix + "'");
    detail::assign_checked(*b.tensor, it->second, b.name);
    loaded.push_back(b.name);
  }
  return loaded;
}

}  // namespace simipu
