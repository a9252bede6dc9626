// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status 0 only when every criterion passes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include "simipu/checkpoint.hpp"
#include "simipu/config.hpp"
#include "simipu/probe.hpp"
#include "simipu/trainer.hpp"
#include "simipu/verify.hpp"

using namespace simipu;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void progress(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

struct Verdict {
  bool pass = false;
  std::string measured;
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v, double secs) {
  if (!v.pass) ++failures;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f s", secs);
  std::cout << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << "  " << title << "  [" << v.measured << "; " << buf
            << "]" << std::endl;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "simipu_acceptance" / name;
  fs::remove_all(p);
  return p;
}

std::vector<SyntheticScene> default_dataset(const RunConfig& cfg) {
  std::vector<SyntheticScene> out;
  for (std::size_t i = 0; i < cfg.data_scenes; ++i) out.push_back(generate_scene(cfg.data_seed + i, cfg.scene));
  return out;
}

bool majority(const std::vector<bool>& v) {
  std::size_t n = 0;
  for (bool b : v) n += b;
  return 2 * n > v.size();
}

Verdict gradcheck() {
  verify::Options opt;
  opt.cases = 100;
  const auto t0 = Clock::now();
  const auto results = verify::gradcheck_suite(opt);
  const double secs = seconds_since(t0);
  double prim = 0.0, comp = 0.0;
  bool ok = true;
  std::string failed;
  bool mutation_caught = false;
  for (const auto& r : results) {
    if (r.name.rfind("mutation.", 0) == 0) {
      mutation_caught = r.passed;
    } else {
      double& worst = r.threshold <= 1e-5 ? prim : comp;
      worst = std::max(worst, r.value);
    }
    if (!r.passed) {
      ok = false;
      failed += " " + r.name;
    }
  }
  ok = ok && secs < 120.0;
  return {ok, "primitive max err " + fmt(prim) + " (<1e-5), composite max err " + fmt(comp) + " (<1e-4), " +
                  std::to_string(results.size()) + " checks, mutated relu " +
                  (mutation_caught ? "caught" : "MISSED") + ", suite " + fmt(secs) + " s (<120)" +
                  (failed.empty() ? "" : ", failed:" + failed)};
}

Verdict matching() {
  verify::Options opt;
  opt.matching_cases = 1000;
  opt.dominance_cases = 1000;
  const auto t0 = Clock::now();
  const auto results = verify::matching_suite(opt);
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  std::string m;
  for (const auto& r : results) {
    if (r.name != "hungarian_vs_brute_force.rect_le_8" && r.name != "hungarian_le_greedy.32x32") continue;
    ok = ok && r.passed && r.cases == 1000;
    m += r.name + " " + (r.passed ? "ok" : "FAILED") + " (worst " + fmt(r.value) + ", " + std::to_string(r.cases) + " cases), ";
  }
  return {ok, m + fmt(secs) + " s (<60)"};
}

Verdict zero_cost() {
  const auto r = verify::zero_cost_recovery_check(100, 0);
  return {r.passed, "worst total cost " + fmt(r.value) + " over " + std::to_string(r.cases) + " clouds (<1e-9)"};
}

Verdict stop_gradient(const RunConfig& base, const std::vector<SyntheticScene>& data) {
  TrainConfig cfg = base.train;
  cfg.weights.lambda_intra = 0.0;
  cfg.weights.mu_inter = 1.0;
  cfg.debug_checks = true;
  const auto scenes = prepare_scenes<float>(data, cfg);
  auto state = init_train_state<float>(cfg.encoder, cfg.seed);
  const std::size_t steps = 10;
  double worst = 0.0, min_image = 1e300;
  std::size_t updated = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto m = advance(state, scenes, cfg);
    if (m.skipped) continue;
    ++updated;
    worst = std::max(worst, m.grad_norm_point);
    min_image = std::min(min_image, m.grad_norm_image);
  }
  const bool ok = updated == steps && worst == 0.0 && min_image > 0.0;
  return {ok, "max point grad norm " + fmt(worst) + " over " + std::to_string(updated) + "/" + std::to_string(steps) +
                  " steps (must be 0), min image grad norm " + fmt(min_image)};
}

Verdict info_nce_closed_forms() {
  const auto a = verify::info_nce_uniform_check(), b = verify::info_nce_two_key_check();
  return {a.passed && b.passed, "uniform |L - ln m| " + fmt(a.value) + ", two-key |L - ln(4/3)| " + fmt(b.value) + " (<1e-6)"};
}

struct RunOutcome {
  SmoothedLosses losses;
  EncoderParams<float> params;
  double seconds = 0.0;
};

RunOutcome train_run(TrainConfig cfg, const std::vector<SyntheticScene>& data, std::uint64_t seed, AssignAlgorithm alg,
                     const std::string& tag) {
  cfg.seed = seed;
  cfg.algorithm = alg;
  cfg.steps = 200;
  cfg.checkpoint_every = 0;
  PretrainOptions o;
  o.out_dir = scratch(tag);
  o.deterministic = true;
  o.log = [&](const std::string& s) {
    if (s.rfind("step ", 0) == 0 && (s.find("step 1/") == 0 || s.find("00/") != std::string::npos)) progress(tag + " " + s);
  };
  const auto t0 = Clock::now();
  auto r = pretrain<float>(cfg, data, o);
  return {r.final_losses, std::move(r.state.params), seconds_since(t0)};
}

}  // namespace

int main() {
  const RunConfig cfg;
  const auto t_all = Clock::now();

  auto timed = [](int id, const std::string& title, const std::function<Verdict()>& f) {
    progress("criterion " + std::to_string(id) + ": " + title);
    const auto t0 = Clock::now();
    const Verdict v = f();
    report(id, title, v, seconds_since(t0));
  };

  timed(1, "gradient checks", gradcheck);
  timed(2, "assignment optimality", matching);
  timed(3, "zero-cost recovery", zero_cost);

  const auto data = default_dataset(cfg);
  timed(4, "inter loss stops point gradients", [&] { return stop_gradient(cfg, data); });
  timed(5, "InfoNCE closed forms", info_nce_closed_forms);

  // Criteria 6-8 share the pretraining runs.
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<RunOutcome> hung, greedy;
  double hung_secs = 0.0;
  for (auto s : seeds) {
    hung.push_back(train_run(cfg.train, data, s, AssignAlgorithm::kHungarian, "hungarian_seed" + std::to_string(s)));
    hung_secs += hung.back().seconds;
  }
  {
    std::vector<bool> ok;
    std::string m;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const auto& l = hung[i].losses;
      const double ri = l.l_intra / l.l_intra_first, re = l.l_inter / l.l_inter_first, gap = l.pos_sim - l.neg_sim;
      ok.push_back(ri <= 0.5 && re <= 0.5 && gap >= 0.2);
      m += "seed " + std::to_string(seeds[i]) + ": intra " + fmt(ri) + " inter " + fmt(re) + " pos-neg " + fmt(gap) +
           (ok.back() ? " ok" : " no") + "; ";
    }
    const bool pass = majority(ok) && hung_secs < 600.0;
    report(6, "convergence (ratios <= 0.5, pos-neg >= 0.2, 2 of 3 seeds, < 600 s)",
           {pass, m + "training " + fmt(hung_secs) + " s"}, hung_secs);
  }

  {
    progress("criterion 7: depth probe");
    const auto t0 = Clock::now();
    std::vector<SyntheticScene> probe_scenes;
    for (std::size_t i = 0; i < 32; ++i) probe_scenes.push_back(generate_scene(cfg.data_seed + 100000 + i, cfg.scene));
    std::vector<bool> ok;
    std::string m;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const auto pre = depth_probe(hung[i].params, cfg.train.encoder, probe_scenes, cfg.probe);
      auto random = init_train_state<float>(cfg.train.encoder, seeds[i]);
      const auto base = depth_probe(random.params, cfg.train.encoder, probe_scenes, cfg.probe);
      ok.push_back(pre.rmse < base.rmse);
      m += "seed " + std::to_string(seeds[i]) + ": pretrained " + fmt(pre.rmse) + " m vs random " + fmt(base.rmse) + " m";
      if (i + 1 < seeds.size()) m += "; ";
    }
    report(7, "probe RMSE pretrained < random (2 of 3 seeds)", {majority(ok), m}, seconds_since(t0));
  }

  {
    progress("criterion 8: greedy runs");
    const auto t0 = Clock::now();
    for (auto s : seeds) greedy.push_back(train_run(cfg.train, data, s, AssignAlgorithm::kGreedy, "greedy_seed" + std::to_string(s)));
    std::vector<bool> ok;
    std::string m;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      ok.push_back(hung[i].losses.pos_sim >= greedy[i].losses.pos_sim);
      m += "seed " + std::to_string(seeds[i]) + ": hungarian " + fmt(hung[i].losses.pos_sim) + " vs greedy " +
           fmt(greedy[i].losses.pos_sim);
      if (i + 1 < seeds.size()) m += "; ";
    }
    report(8, "final pos cosine hungarian >= greedy (2 of 3 seeds)", {majority(ok), m}, seconds_since(t0));
  }

  timed(9, "KITTI calibration and projection consistency", [&] {
    const auto cam = parse_kitti_calib(read_file(fs::path(SIMIPU_TEST_DATA_DIR) / "kitti_000000_calib.txt"));
    const bool fx_ok = cam.fx() == 721.5377;
    double worst = 1.0;
    const fs::path dir = scratch("scenes");
    for (std::size_t i = 0; i < 20; ++i) {
      write_scene(dir / scene_dir_name(i), data[i], "");
      const auto back = read_scene(dir / scene_dir_name(i));
      worst = std::min(worst, projection_consistency(back.cloud, back.camera, back.depth_gt, 0.1));
    }
    return Verdict{fx_ok && worst >= 0.99, "fx " + detail::format_double(cam.fx()) + ", worst consistency " + fmt(worst) +
                                               " over 20 round-tripped scenes (>= 0.99 within 0.1 m)"};
  });

  timed(10, "bitwise reproducibility and resume", [&] {
    TrainConfig c = cfg.train;
    c.steps = 5;
    c.checkpoint_every = 0;
    PretrainOptions o;
    o.deterministic = true;
    const fs::path a = scratch("repro_a"), b = scratch("repro_b"), r = scratch("repro_resume");
    o.out_dir = a;
    pretrain<float>(c, data, o);
    o.out_dir = b;
    pretrain<float>(c, data, o);
    TrainConfig short_c = c;
    short_c.steps = 2;
    o.out_dir = r;
    pretrain<float>(short_c, data, o);
    o.resume = r / "checkpoint.sipu";
    pretrain<float>(c, data, o);
    const bool same = read_file(a / "metrics.jsonl") == read_file(b / "metrics.jsonl");
    const bool resumed = read_file(a / "metrics.jsonl") == read_file(r / "metrics.jsonl") &&
                         read_file(a / "checkpoint.sipu") == read_file(r / "checkpoint.sipu");
    return Verdict{same && resumed, std::string("rerun metrics ") + (same ? "identical" : "DIFFER") + ", 2+3 resume vs 5 " +
                                        (resumed ? "identical" : "DIFFER")};
  });

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << " in "
            << fmt(seconds_since(t_all)) << " s" << std::endl;
  return failures ? 1 : 0;
}
