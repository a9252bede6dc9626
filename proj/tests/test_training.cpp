#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "simipu/checkpoint.hpp"
#include "simipu/config.hpp"
#include "simipu/probe.hpp"
#include "simipu/trainer.hpp"

using namespace simipu;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.encoder.point_stages = {{64, 16, 1.5, 8}, {32, 16, 3.0, 8}};
  c.encoder.image_channels = {8, 8};
  c.encoder.embedding_dim = 16;
  c.batch_size = 2;
  c.steps = 5;
  c.checkpoint_every = 0;
  c.pair_cap = 64;
  return c;
}

std::vector<SyntheticScene> small_dataset(std::size_t n) {
  SceneConfig sc;
  sc.points = 256;
  std::vector<SyntheticScene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(500 + i, sc));
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("simipu_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Optim, PartitionsFollowNames) {
  EncoderConfig cfg;
  Rng rng(0);
  const auto params = init_params<float>(cfg, rng);
  std::size_t point = 0, image = 0;
  for (const auto& e : params.registry()) {
    EXPECT_EQ(branch_of(e.name), e.branch) << e.name;
    (e.branch == Branch::kPoint ? point : image) += 1;
  }
  EXPECT_GT(point, 0u);
  EXPECT_GT(image, 0u);
}

TEST(Optim, HandWorkedSgdAndAdamWSteps) {
  EncoderParams<double> params;
  params.point_head.hidden = {diff::Var<double>::parameter(Tensor<double>(Shape{1, 1}, 2.0)),
                              diff::Var<double>::parameter(Tensor<double>(Shape{1}))};
  params.point_head.output = params.point_head.hidden;
  params.image_head.hidden = {diff::Var<double>::parameter(Tensor<double>(Shape{1, 1}, 2.0)),
                              diff::Var<double>::parameter(Tensor<double>(Shape{1}))};
  params.image_head.output = params.image_head.hidden;
  // keep only the two hidden weights
  auto registry = params.registry();
  std::vector<ParamEntry<double>> two{registry[0], registry[4]};
  ASSERT_EQ(two[0].branch, Branch::kPoint);
  ASSERT_EQ(two[1].branch, Branch::kImage);
  auto state = OptimizerState<double>::zeros(two);
  two[0].var.node()->grad = Tensor<double>(Shape{1, 1}, 0.5);
  two[1].var.node()->grad = Tensor<double>(Shape{1, 1}, 0.5);
  HybridOptimConfig cfg;
  cfg.image.lr = 0.1;
  cfg.point.lr = 0.01;
  hybrid_update(two, state, cfg);

  // sgd: g = 0.5 + 1e-4 * 2, m = g, w = 2 - 0.1 g
  EXPECT_NEAR(two[1].var.value()[0], 2.0 - 0.1 * (0.5 + 2e-4), 1e-15);
  // adamw: decoupled decay first, then a first bias-corrected step of size lr
  const double decayed = 2.0 - 0.01 * 0.01 * 2.0;
  EXPECT_NEAR(two[0].var.value()[0], decayed - 0.01 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_EQ(state.adam_steps, 1u);
}

TEST(Checkpoint, RoundTripIsExact) {
  auto state = init_train_state<float>(small_config().encoder, 3);
  state.step = 7;
  state.rng.next_u64();
  const std::string bytes = save_checkpoint(state, {"", "abc"});
  auto other = init_train_state<float>(small_config().encoder, 99);
  load_checkpoint(bytes, other);
  EXPECT_EQ(other.step, 7u);
  EXPECT_EQ(save_checkpoint(other, {"", "abc"}), bytes);
}

TEST(Checkpoint, PrefixLoadTouchesOnlyThatBranch) {
  const auto enc = small_config().encoder;
  auto src = init_train_state<float>(enc, 1);
  const std::string point_only = save_checkpoint(src, {"point_", ""});
  auto dst = init_train_state<float>(enc, 2);
  EXPECT_THROW(load_checkpoint_prefix(point_only, dst, "image_"), ConfigError);
  const auto loaded = load_checkpoint_prefix(save_checkpoint(src), dst, "image_");
  EXPECT_FALSE(loaded.empty());
  const auto a = src.params.registry(), b = dst.params.registry();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].branch == Branch::kImage) {
      EXPECT_EQ(a[i].var.value(), b[i].var.value()) << a[i].name;
    } else if (a[i].decay) {
      EXPECT_NE(a[i].var.value(), b[i].var.value()) << a[i].name;
    }
  }
  EXPECT_THROW(load_checkpoint("junk", dst), FormatError);
}

TEST(Config, RejectsUnknownAndDuplicateKeys) {
  EXPECT_THROW(parse_run_config("[train]\nsteps = 3\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[train]\nsteps = 3\nsteps = 4\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[nowhere]\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[loss]\ntemperature = -1\n"), ConfigError);
  EXPECT_EQ(parse_run_config("[train]\nsteps = 3\n").train.steps, 3u);
}

TEST(Config, DigestIgnoresCommentsAndOrder) {
  const auto a = parse_run_config("[train]\nsteps = 3\nseed = 9\n[loss]\nmu_inter = 0.5\n");
  const auto b = parse_run_config("# run\n[loss]\nmu_inter = 0.5 ; half\n\n[train]\nseed = 9\nsteps = 3\n");
  EXPECT_EQ(config_digest(a), config_digest(b));
  EXPECT_NE(config_digest(a), config_digest(RunConfig{}));
  EXPECT_EQ(config_digest(parse_run_config(render_run_config(a))), config_digest(a));
}

TEST(TrainStep, LossWeightAblationsSilenceABranch) {
  const auto data = small_dataset(2);
  for (const bool point_off : {false, true}) {
    auto cfg = small_config();
    cfg.weights.lambda_intra = point_off ? 0.0 : 1.0;
    cfg.weights.mu_inter = point_off ? 1.0 : 0.0;
    const auto scenes = prepare_scenes<float>(data, cfg);
    auto state = init_train_state<float>(cfg.encoder, 0);
    for (int step = 0; step < 3; ++step) {
      const auto m = advance(state, scenes, cfg);
      ASSERT_FALSE(m.skipped);
      if (point_off) {
        EXPECT_EQ(m.grad_norm_point, 0.0);
        EXPECT_GT(m.grad_norm_image, 0.0);
      } else {
        EXPECT_EQ(m.grad_norm_image, 0.0);
        EXPECT_GT(m.grad_norm_point, 0.0);
      }
    }
  }
}

TEST(TrainStep, DebugChecksPass) {
  auto cfg = small_config();
  cfg.debug_checks = true;
  const auto scenes = prepare_scenes<float>(small_dataset(2), cfg);
  auto state = init_train_state<float>(cfg.encoder, 0);
  EXPECT_NO_THROW(advance(state, scenes, cfg));
}

TEST(Pretrain, ResumeMatchesUninterruptedRun) {
  auto cfg = small_config();
  cfg.checkpoint_every = 2;
  const auto data = small_dataset(4);
  const fs::path full = fresh_dir("full"), part = fresh_dir("part");
  PretrainOptions o;
  o.deterministic = true;
  o.out_dir = full;
  const auto ref = pretrain<float>(cfg, data, o);

  auto short_cfg = cfg;
  short_cfg.steps = 2;
  o.out_dir = part;
  pretrain<float>(short_cfg, data, o);
  o.resume = part / "checkpoint.sipu";
  const auto resumed = pretrain<float>(cfg, data, o);

  EXPECT_EQ(read_file(full / "metrics.jsonl"), read_file(part / "metrics.jsonl"));
  EXPECT_EQ(read_file(full / "checkpoint.sipu"), read_file(part / "checkpoint.sipu"));
  EXPECT_EQ(resumed.state.step, 5u);
  EXPECT_TRUE(fs::exists(full / checkpoint_name(2)));
}

TEST(Pretrain, WarmStartLogsFreshPointBranch) {
  auto cfg = small_config();
  cfg.steps = 1;
  const auto data = small_dataset(2);
  PretrainOptions o;
  o.out_dir = fresh_dir("warm_src");
  pretrain<float>(cfg, data, o);
  std::vector<std::string> lines;
  o.warm_start = o.out_dir / "checkpoint.sipu";
  o.out_dir = fresh_dir("warm_dst");
  o.log = [&](const std::string& s) { lines.push_back(s); };
  pretrain<float>(cfg, data, o);
  bool fresh = false;
  for (const auto& l : lines) fresh = fresh || l.find("point branch uses fresh initialization") != std::string::npos;
  EXPECT_TRUE(fresh);
}

TEST(Pretrain, SweepWritesOneMetricsFilePerSize) {
  auto cfg = small_config();
  cfg.steps = 2;
  SceneConfig sc;
  sc.points = 256;
  PretrainOptions o;
  o.out_dir = fresh_dir("sweep");
  o.deterministic = true;
  const auto entries = data_scale_sweep<float>(cfg, sc, 10, {2, 3}, o);
  ASSERT_EQ(entries.size(), 2u);
  for (const auto& e : entries) {
    std::ifstream in(e.metrics);
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) lines += !l.empty();
    EXPECT_EQ(lines, 2u) << e.metrics;
  }
}

TEST(Probe, OracleFeaturesFitAndLossFalls) {
  SceneConfig sc;
  sc.points = 256;
  std::vector<SyntheticScene> scenes;
  for (std::uint64_t s = 0; s < 8; ++s) scenes.push_back(generate_scene(70 + s, sc));
  ProbeConfig pc;
  pc.pixels_per_scene = 128;
  const auto r = oracle_depth_probe(scenes, pc);
  EXPECT_LT(r.rmse, 0.05);
  ASSERT_GE(r.epoch_losses.size(), 10u);
  for (std::size_t i = 1; i < 10; ++i) EXPECT_LE(r.epoch_losses[i], r.epoch_losses[i - 1]);
}

TEST(Probe, DegenerateSplitIsRejected) {
  const auto one = small_dataset(1);
  EXPECT_THROW(oracle_depth_probe(one, ProbeConfig{}), ConfigError);
}
