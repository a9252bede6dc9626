#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "simipu/checkpoint.hpp"
#include "simipu/config.hpp"
#include "simipu/dataio.hpp"
#include "simipu/probe.hpp"
#include "simipu/trainer.hpp"
#include "simipu/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace simipu;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

void progress(const std::string& msg) { std::cerr << msg << std::endl; }

void emit(const ordered_json& j) { std::cout << j.dump() << std::endl; }

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  const std::string text = read_file(path);
  try {
    return parse_run_config(text);
  } catch (const ParseError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

bool deterministic_env() {
  const char* v = std::getenv("SIMIPU_DETERMINISTIC");
  return v && std::string(v) == "1";
}

ordered_json losses_json(const SmoothedLosses& s) {
  ordered_json j;
  j["l_intra"] = s.l_intra;
  j["l_inter"] = s.l_inter;
  j["l_intra_first"] = s.l_intra_first;
  j["l_inter_first"] = s.l_inter_first;
  j["intra_ratio"] = s.l_intra_first > 0 ? s.l_intra / s.l_intra_first : 0.0;
  j["inter_ratio"] = s.l_inter_first > 0 ? s.l_inter / s.l_inter_first : 0.0;
  j["mean_pos_sim"] = s.pos_sim;
  j["mean_neg_sim"] = s.neg_sim;
  return j;
}

struct GenData {
  std::string out, config;
  std::size_t scenes = 0;
  std::optional<std::uint64_t> seed;
};

int run_gen_data(const GenData& a) {
  const RunConfig cfg = load_config(a.config);
  const std::uint64_t seed = a.seed.value_or(cfg.data_seed);
  write_archive(a.out, a.scenes, seed, cfg.scene, config_digest(cfg));
  progress("wrote " + std::to_string(a.scenes) + " scenes to " + a.out);
  emit({{"out", a.out}, {"scenes", a.scenes}, {"base_seed", seed}, {"config_digest", config_digest(cfg)}});
  return kOk;
}

struct Pretrain {
  std::string data, config, out, warm_start, resume;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

int run_pretrain(const Pretrain& a) {
  RunConfig cfg = load_config(a.config);
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.seed) cfg.train.seed = *a.seed;
  const auto scenes = read_archive(a.data);
  PretrainOptions opts;
  opts.out_dir = a.out;
  if (!a.warm_start.empty()) opts.warm_start = a.warm_start;
  if (!a.resume.empty()) opts.resume = a.resume;
  opts.config_digest = config_digest(cfg);
  opts.deterministic = a.deterministic || deterministic_env();
  opts.log = progress;
  const auto r = pretrain<float>(cfg.train, scenes, opts);
  ordered_json j = losses_json(r.final_losses);
  j["steps"] = r.state.step;
  j["skipped_steps"] = r.skipped_steps;
  j["checkpoint"] = r.checkpoint.string();
  j["config_digest"] = opts.config_digest;
  emit(j);
  return kOk;
}

struct Sweep {
  std::string config, out, sizes = "8,16,32,64";
  std::optional<std::size_t> steps;
};

int run_sweep(const Sweep& a) {
  RunConfig cfg = load_config(a.config);
  if (a.steps) cfg.train.steps = *a.steps;
  std::vector<std::size_t> sizes;
  std::stringstream ss(a.sizes);
  for (std::string tok; std::getline(ss, tok, ',');) sizes.push_back(detail::parse_number<std::size_t>(tok, "--sizes"));
  PretrainOptions opts;
  opts.out_dir = a.out;
  opts.config_digest = config_digest(cfg);
  opts.deterministic = deterministic_env();
  opts.log = progress;
  ordered_json runs = ordered_json::array();
  for (const auto& e : data_scale_sweep<float>(cfg.train, cfg.scene, cfg.data_seed, sizes, opts)) {
    ordered_json j = losses_json(e.final_losses);
    j["scenes"] = e.scenes;
    j["metrics"] = e.metrics.string();
    runs.push_back(j);
  }
  emit({{"runs", runs}});
  return kOk;
}

struct Verify {
  std::string suite = "all";
  bool inject_fault = false;
  std::uint64_t seed = 0;
};

int run_verify(const Verify& a) {
  verify::Options opt;
  opt.inject_fault = a.inject_fault;
  opt.seed = a.seed;
  std::vector<verify::CheckResult> results;
  auto run = [&](const std::string& name, auto suite) {
    if (a.suite != name && a.suite != "all") return;
    progress("running " + name + " suite");
    for (auto& r : suite(opt)) results.push_back(std::move(r));
  };
  run("gradcheck", verify::gradcheck_suite);
  run("matching", verify::matching_suite);
  run("geometry", verify::geometry_suite);
  run("losses", verify::losses_suite);
  ordered_json checks = ordered_json::array();
  std::vector<std::string> failed;
  for (const auto& r : results) {
    checks.push_back(verify::to_json(r));
    if (!r.passed) failed.push_back(r.name);
  }
  for (const auto& f : failed) progress("FAILED: " + f);
  emit({{"suite", a.suite}, {"passed", failed.empty()}, {"failed", failed}, {"checks", checks}});
  return failed.empty() ? kOk : kCheckFailed;
}

struct Probe {
  std::string ckpt, data, config, baseline = "random", baseline_ckpt;
  bool oracle_features = false;
};

EncoderParams<float> image_branch_from(const std::string& path, const EncoderConfig& encoder, std::uint64_t seed) {
  auto state = init_train_state<float>(encoder, seed);
  load_checkpoint_prefix(read_file(path), state, branch_prefix(Branch::kImage));
  return std::move(state.params);
}

int run_probe(const Probe& a) {
  const RunConfig cfg = load_config(a.config);
  const auto scenes = read_archive(a.data);
  ProbeResult pre, base;
  if (a.oracle_features) {
    progress("probe: oracle features");
    pre = oracle_depth_probe(scenes, cfg.probe);
  } else {
    auto params = image_branch_from(a.ckpt, cfg.train.encoder, cfg.train.seed);
    progress("probe: checkpoint encoder");
    pre = depth_probe(params, cfg.train.encoder, scenes, cfg.probe);
  }
  if (a.baseline == "random") {
    auto state = init_train_state<float>(cfg.train.encoder, cfg.train.seed);
    progress("probe: random encoder (seed " + std::to_string(cfg.train.seed) + ")");
    base = depth_probe(state.params, cfg.train.encoder, scenes, cfg.probe);
  } else {
    if (a.baseline_ckpt.empty()) throw ConfigError("--baseline ckpt needs --baseline-ckpt");
    auto params = image_branch_from(a.baseline_ckpt, cfg.train.encoder, cfg.train.seed);
    progress("probe: baseline checkpoint encoder");
    base = depth_probe(params, cfg.train.encoder, scenes, cfg.probe);
  }
  emit({{"pretrained_rmse", pre.rmse},
        {"baseline_rmse", base.rmse},
        {"delta", pre.rmse - base.rmse},
        {"pretrained_si", pre.si},
        {"baseline_si", base.si},
        {"baseline", a.baseline},
        {"oracle_features", a.oracle_features}});
  return kOk;
}

struct MatchDemo {
  std::string scene, config, algorithm = "hungarian";
  std::uint64_t seed = 0;
  bool permuted = false;
};

ordered_json rows_json(const Locations& l) {
  ordered_json j = ordered_json::array();
  for (Eigen::Index i = 0; i < l.rows(); ++i) j.push_back({l(i, 0), l(i, 1), l(i, 2)});
  return j;
}

int run_match_demo(const MatchDemo& a) {
  const RunConfig cfg = load_config(a.config);
  const auto scene = read_scene(a.scene);
  const auto cloud = fov_filter(scene.cloud, scene.camera, cfg.train.min_depth);
  if (!cloud) throw ConfigError("scene " + a.scene + " has no points in view");
  Rng rng(a.seed);
  const SimilarityTransform t = sample_transform(rng, cfg.train.transforms);
  const std::size_t k = std::min(cfg.train.encoder.point_stages.front().points, cloud->size());
  const Locations loc = cloud->locations();
  Locations alpha(static_cast<Eigen::Index>(k), 3), beta;
  {
    const auto idx = d_fps(loc, k, static_cast<std::size_t>(rng.below(loc.rows())));
    for (std::size_t i = 0; i < k; ++i) alpha.row(static_cast<Eigen::Index>(i)) = loc.row(static_cast<Eigen::Index>(idx[i]));
  }
  if (a.permuted) {
    const Locations moved = t.apply(alpha);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = k; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.below(i))]);
    beta.resize(static_cast<Eigen::Index>(k), 3);
    for (std::size_t i = 0; i < k; ++i) beta.row(static_cast<Eigen::Index>(perm[i])) = moved.row(static_cast<Eigen::Index>(i));
  } else {
    const Locations moved = apply_transform(*cloud, t).locations();
    const auto idx = d_fps(moved, k, static_cast<std::size_t>(rng.below(moved.rows())));
    beta.resize(static_cast<Eigen::Index>(k), 3);
    for (std::size_t i = 0; i < k; ++i) beta.row(static_cast<Eigen::Index>(i)) = moved.row(static_cast<Eigen::Index>(idx[i]));
  }
  const auto algorithm = a.algorithm == "greedy" ? AssignAlgorithm::kGreedy : AssignAlgorithm::kHungarian;
  const MatchSet m = build_intra_matches(alpha, beta, t, algorithm, cfg.train.pair_cap);
  ordered_json pairs = ordered_json::array();
  for (std::size_t i = 0; i < m.size(); ++i) pairs.push_back({m.pairs[i].first, m.pairs[i].second, m.costs[i]});
  Eigen::Matrix4d h = Eigen::Matrix4d::Identity();
  h.topLeftCorner<3, 3>() = t.scale() * t.rotation();
  h.topRightCorner<3, 1>() = t.translation();
  ordered_json transform = ordered_json::array();
  for (int r = 0; r < 3; ++r) transform.push_back({h(r, 0), h(r, 1), h(r, 2), h(r, 3)});
  emit({{"scene", a.scene},
        {"algorithm", a.algorithm},
        {"permuted", a.permuted},
        {"total_cost", m.total_cost()},
        {"pairs", pairs},
        {"transform", transform},
        {"alpha", rows_json(alpha)},
        {"beta", rows_json(beta)}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simipu: desk-scale contrastive pre-training for LIDAR and camera encoders"};
  app.require_subcommand(1);

  GenData gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic scene archive");
  c_gen->add_option("--out", gen.out, "Archive directory")->required();
  c_gen->add_option("--scenes", gen.scenes, "Number of scenes")->required();
  c_gen->add_option("--seed", gen.seed, "Base scene seed (default data.seed)");
  c_gen->add_option("--config", gen.config, "Run configuration file");

  Pretrain pre;
  auto* c_pre = app.add_subcommand("pretrain", "Run contrastive pre-training");
  c_pre->add_option("--data", pre.data, "Scene archive")->required();
  c_pre->add_option("--out", pre.out, "Output directory")->required();
  c_pre->add_option("--config", pre.config, "Run configuration file");
  c_pre->add_option("--warm-start", pre.warm_start, "Checkpoint supplying image-branch weights");
  c_pre->add_option("--resume", pre.resume, "Checkpoint to resume from");
  c_pre->add_option("--steps", pre.steps, "Override train.steps");
  c_pre->add_option("--seed", pre.seed, "Override train.seed");
  c_pre->add_flag("--deterministic", pre.deterministic, "Record wall_ms as 0");

  Sweep sweep;
  auto* c_sweep = app.add_subcommand("sweep", "Pre-train once per dataset size");
  c_sweep->add_option("--out", sweep.out, "Output directory")->required();
  c_sweep->add_option("--config", sweep.config, "Run configuration file");
  c_sweep->add_option("--sizes", sweep.sizes, "Comma-separated dataset sizes");
  c_sweep->add_option("--steps", sweep.steps, "Override train.steps");

  Verify ver;
  auto* c_ver = app.add_subcommand("verify", "Run oracle verification suites");
  c_ver->add_option("--suite", ver.suite, "Suite to run")->check(CLI::IsMember({"gradcheck", "matching", "geometry", "losses", "all"}));
  c_ver->add_flag("--inject-fault", ver.inject_fault, "Use a relu with a wrong backward (must fail)");
  c_ver->add_option("--seed", ver.seed, "Case seed");

  Probe probe;
  auto* c_probe = app.add_subcommand("probe", "Frozen-encoder linear depth probe");
  c_probe->add_option("--ckpt", probe.ckpt, "Checkpoint with the image branch to probe");
  c_probe->add_option("--data", probe.data, "Scene archive")->required();
  c_probe->add_option("--config", probe.config, "Run configuration file");
  c_probe->add_option("--baseline", probe.baseline, "Baseline encoder")->check(CLI::IsMember({"random", "ckpt"}));
  c_probe->add_option("--baseline-ckpt", probe.baseline_ckpt, "Baseline checkpoint for --baseline ckpt");
  c_probe->add_flag("--oracle-features", probe.oracle_features, "Use true log depth as the probe feature");

  MatchDemo md;
  auto* c_md = app.add_subcommand("match-demo", "Dump intra-modal pairs for one scene");
  c_md->add_option("--scene", md.scene, "Scene directory")->required();
  c_md->add_option("--config", md.config, "Run configuration file");
  c_md->add_option("--algorithm", md.algorithm, "Assignment algorithm")->check(CLI::IsMember({"hungarian", "greedy"}));
  c_md->add_option("--seed", md.seed, "Transform and sampling seed");
  c_md->add_flag("--permuted", md.permuted, "Second view is an exact transformed permutation of the first");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*c_gen) return run_gen_data(gen);
    if (*c_pre) return run_pretrain(pre);
    if (*c_sweep) return run_sweep(sweep);
    if (*c_ver) return run_verify(ver);
    if (*c_probe) {
      if (probe.ckpt.empty() && !probe.oracle_features) throw ConfigError("probe needs --ckpt or --oracle-features");
      return run_probe(probe);
    }
    if (*c_md) return run_match_demo(md);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << std::endl;
    return kNumeric;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << std::endl;
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << std::endl;
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << std::endl;
    return kIo;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "format error: " << e.what() << std::endl;
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << std::endl;
    return kIo;
  }
  return kOk;
}
