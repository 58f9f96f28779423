// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,...] [--cli PATH] [--smoke-config PATH] [--work DIR]
//              [--report PATH]
//
// Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "geoworld/aids.hpp"
#include "geoworld/error.hpp"
#include "geoworld/flow_match.hpp"
#include "geoworld/io.hpp"
#include "geoworld/metrics.hpp"
#include "geoworld/pipeline.hpp"
#include "geoworld/scene.hpp"
#include "geoworld/world_model.hpp"

namespace fs = std::filesystem;
using namespace geoworld;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

struct Options {
  std::string cli;
  std::string smoke_config;
  fs::path work = fs::temp_directory_path() / "geoworld_acceptance";
  fs::path report;
};

// 1. Correspondence oracle: stored tracks vs project_correspondence, < 1e-6 px, < 30 s.
Outcome correspondence() {
  const auto t0 = Clock::now();
  scene::SceneGenParams gp;
  gp.height = gp.width = 64;
  gp.frames = 8;
  gp.num_tracks = 64;
  gp.moving_object_prob = 0.5;
  double worst = 0.0;
  long checked = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const scene::Rollout r = scene::generate_rollout(scene::random_scene(gp, 1000 + seed));
    for (const auto& tr : r.tracks)
      for (int t = 0; t + 1 < r.config.frames; ++t) {
        const auto& s = tr.samples[static_cast<std::size_t>(t)];
        const auto& next = tr.samples[static_cast<std::size_t>(t) + 1];
        if (!s.visible || !next.visible) continue;
        const auto rel = relative_pose(r.frames[static_cast<std::size_t>(t)].camera,
                                       r.frames[static_cast<std::size_t>(t) + 1].camera);
        const auto p = project_correspondence(s.pixel, s.point.z(), r.config.intrinsics, rel, s.flow);
        if (!p) return {false, "projection failed for a visible point"};
        worst = std::max({worst, std::abs(p->u - next.pixel.u), std::abs(p->v - next.pixel.v)});
        ++checked;
      }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 30.0 && checked > 0,
          std::to_string(checked) + " visible pairs, max error " + fmt("%.3g", worst) + " px, " + fmt("%.1f", secs) + " s"};
}

ModelConfig small_model() {
  ModelConfig c;
  c.frames = 2;
  c.grid_h = c.grid_w = 2;
  c.latent_channels = 4;
  c.geometry_channels = 3;
  c.width = 32;
  c.heads = 4;
  c.video_depth = 2;
  c.geometry_depth = 2;
  c.mid_layer = 1;
  c.vocab = 4;
  return c;
}

std::vector<TrainingExample> random_examples(const ModelConfig& c, Rng& rng, int n) {
  std::vector<TrainingExample> out;
  for (int i = 0; i < n; ++i) {
    TrainingExample ex;
    ex.z0 = LatentTensor(c.frames, c.tokens_per_frame(), c.latent_channels);
    ex.g0 = LatentTensor(c.frames, c.tokens_per_frame(), c.geometry_channels);
    for (Eigen::Index k = 0; k < ex.z0.data.size(); ++k) ex.z0.data.data()[k] = rng.normal();
    for (Eigen::Index k = 0; k < ex.g0.data.size(); ++k) ex.g0.data.data()[k] = rng.normal();
    ex.instruction = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab)));
    out.push_back(std::move(ex));
  }
  return out;
}

// 2. Gradient check: 2-block, 32-channel model, 20 parameters, 5 seeds, < 1e-4 relative, < 2 min.
Outcome gradients() {
  const auto t0 = Clock::now();
  const ModelConfig c = small_model();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const auto data = random_examples(c, rng, 2);
    const Batch batch = sample_batch(data, 2, rng);
    Parameters p = init_parameters(c, 200 + seed, false);
    const auto g = grad(c, p, batch, c.alpha);
    const double h = 1e-5;
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = rng.below(p.size());
      const double keep = p.values()[i];
      p.values()[i] = keep + h;
      const double up = joint_loss(c, p, batch, c.alpha).total;
      p.values()[i] = keep - h;
      const double down = joint_loss(c, p, batch, c.alpha).total;
      p.values()[i] = keep;
      const double num = (up - down) / (2 * h), ana = g.grad.values()[i];
      worst = std::max(worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6}));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0, "max relative error " + fmt("%.3g", worst) + ", " + fmt("%.1f", secs) + " s"};
}

// 3. Stop-gradient identity: g(a) - g_sg(a) = a (g(1) - g_sg(1)) elementwise within 1e-9.
Outcome decomposition() {
  const ModelConfig c = small_model();
  double worst = 0.0, induced = 0.0;
  bool head_clean = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(300 + seed);
    const auto data = random_examples(c, rng, 3);
    const Batch batch = sample_batch(data, 3, rng);
    const Parameters p = init_parameters(c, 400 + seed, false);
    const double a = 0.1 + 0.2 * static_cast<double>(seed);
    const auto fa = grad(c, p, batch, a), sa = grad(c, p, batch, a, true);
    const auto f1 = grad(c, p, batch, 1.0), s1 = grad(c, p, batch, 1.0, true);
    for (const auto& s : p.slices()) {
      if (s.branch == Branch::Geometry) continue;
      for (std::size_t i = s.offset; i < s.offset + s.size(); ++i) {
        const double lhs = fa.grad.values()[i] - sa.grad.values()[i];
        const double rhs = a * (f1.grad.values()[i] - s1.grad.values()[i]);
        worst = std::max(worst, std::abs(lhs - rhs));
        induced = std::max(induced, std::abs(rhs));
        if (s.branch == Branch::VideoHead && lhs != 0.0) head_clean = false;
      }
    }
  }
  return {worst <= 1e-9 && head_clean && induced > 0.0,
          "max deviation " + fmt("%.3g", worst) + ", largest induced term " + fmt("%.3g", induced) +
              (head_clean ? ", head untouched" : ", head gradient changed")};
}

// 4. Inference independence: generations bit-identical with the geometry branch zeroed, 10 seeds.
Outcome inference_independence() {
  scene::SceneGenParams gp;
  gp.height = gp.width = 32;
  gp.frames = 8;
  gp.patch = 4;
  std::vector<scene::Rollout> rs;
  for (std::uint64_t s = 0; s < 4; ++s) rs.push_back(scene::generate_rollout(scene::random_scene(gp, 500 + s)));
  const PatchCodec codec = PatchCodec::fit(rs, 16, 4);
  ModelConfig c;  // 32x32 frames, 8x8 patch grid
  const Parameters p = init_parameters(c, 77, false);
  Parameters zeroed = p;
  zeroed.zero_branch(Branch::Geometry);
  int identical = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    p.reset_reads();
    const auto a = generate(c, p, codec, rs[seed % 4].frames[0], static_cast<int>(seed % 6), 8, seed);
    const auto b = generate(c, zeroed, codec, rs[seed % 4].frames[0], static_cast<int>(seed % 6), 8, seed);
    bool same = p.reads(Branch::Geometry) == 0;
    for (std::size_t t = 0; t < a.size(); ++t) same = same && a[t].rgb == b[t].rgb && a[t].depth == b[t].depth;
    identical += same;
  }
  return {identical == 10, std::to_string(identical) + "/10 seeds bit-identical, geometry parameters never read"};
}

// 5. Distillation thesis, directional: alpha = 0.5 at least as good as alpha = 0 on both
// mean track accuracy and mean AbsRel in >= 4 of 5 seed pairs, total <= 2 h.
Outcome distillation(const Options& opt) {
  const auto t0 = Clock::now();
  pipeline::RunConfig cfg = pipeline::run_config_from_json({
      {"scene", {{"height", 32}, {"width", 32}, {"frames", 8}, {"patch", 4}, {"max_objects", 3}, {"num_tracks", 32}}},
      {"model", {{"latent_channels", 16}, {"width", 32}, {"heads", 4}, {"video_depth", 4}, {"geometry_depth", 2}, {"mid_layer", 2}}},
      {"optimizer", {{"steps", 3000}, {"batch_size", 2}, {"learning_rate", 1e-3}}},
      {"metrics", {{"align_depth_scale", false}, {"point_budget", 128}}},
      {"sample_steps", 20},
  });
  const auto train_set = pipeline::generate_dataset(cfg, 200, 0x5eed0001);
  const auto held_out = pipeline::generate_dataset(cfg, 50, 0x5eed0002);
  const pipeline::Prepared prep = pipeline::prepare(train_set, cfg);
  const PatchCodec& codec = prep.codec;

  std::ostringstream csv;
  csv << "pair,alpha,track_delta_avg,absrel,final_L_vid,final_L_geo\n";
  int wins = 0;
  std::string detail;
  for (int pair = 0; pair < 5; ++pair) {
    double track[2], absrel[2];
    for (int arm = 0; arm < 2; ++arm) {
      ModelConfig mc = cfg.model;
      mc.alpha = arm == 0 ? 0.0 : 0.5;
      const TrainResult tr = train(prep.examples, mc, cfg.optimizer, 9000 + static_cast<std::uint64_t>(pair));
      Checkpoint ck;
      ck.config = mc;
      ck.params = tr.params;
      std::vector<metrics::MetricReport> reps;
      for (std::size_t i = 0; i < held_out.size(); ++i) {
        const auto& gt = held_out[i];
        const auto pred = pipeline::predict(ck, codec, gt, gt.config.instruction, cfg.sample_steps,
                                            pipeline::derive_seed(static_cast<std::uint64_t>(pair), i));
        metrics::MetricOptions mo = cfg.metrics;
        mo.seed = i;
        reps.push_back(metrics::evaluate_rollout(pred, gt, gt.config.intrinsics, mo));
      }
      const auto m = metrics::mean_report(reps);
      track[arm] = m.track_delta_avg;
      absrel[arm] = m.absrel;
      double lv = 0, lg = 0;
      const std::size_t tail = std::min<std::size_t>(100, tr.curve.size());
      for (std::size_t k = tr.curve.size() - tail; k < tr.curve.size(); ++k)
        lv += tr.curve[k].loss.video / tail, lg += tr.curve[k].loss.geometry / tail;
      csv << pair << "," << mc.alpha << "," << io::format_double(m.track_delta_avg) << "," << io::format_double(m.absrel)
          << "," << io::format_double(lv) << "," << io::format_double(lg) << "\n";
      std::cout << "  [5] pair " << pair << " alpha " << mc.alpha << ": track " << fmt("%.4f", m.track_delta_avg)
                << " absrel " << fmt("%.4f", m.absrel) << " (" << fmt("%.0f", seconds_since(t0)) << " s)" << std::endl;
    }
    const bool win = track[1] >= track[0] && absrel[1] <= absrel[0];
    wins += win;
    detail += (pair ? " " : "") + std::string(win ? "W" : "L");
  }
  const double secs = seconds_since(t0);
  if (!opt.report.empty()) io::write_text(opt.report, csv.str());
  return {wins >= 4 && secs <= 7200.0,
          std::to_string(wins) + "/5 pairs favor alpha=0.5 [" + detail + "], " + fmt("%.0f", secs) + " s"};
}

// 6. Flow-matching sampler: constant velocity exact; exponential field first order.
Outcome sampler() {
  LatentTensor z1(1, 3, 2);
  z1.data << 0.5, -1.25, 2.0, 0.75, -0.5, 1.5;
  LatentTensor v(1, 3, 2);
  v.data << 0.25, 0.5, -1.0, 2.0, -0.125, 0.0625;
  bool exact = true;
  for (int steps : {1, 4, 16, 64, 256}) {
    const auto out = flow::euler_sample([&](const LatentTensor&, double) { return v; }, z1, steps);
    exact = exact && (out.data - (z1.data - v.data)).cwiseAbs().maxCoeff() == 0.0;
  }
  LatentTensor one(1, 1, 1);
  one.data(0, 0) = 1.0;
  auto err = [&](int steps) {
    const auto out = flow::euler_sample([](const LatentTensor& z, double) {
      LatentTensor w = z;
      w.data = -z.data;
      return w;
    }, one, steps);
    return std::abs(out.data(0, 0) - std::exp(1.0));
  };
  const double e10 = err(10), e100 = err(100), e1000 = err(1000);
  const double s1 = std::log10(e10 / e100), s2 = std::log10(e100 / e1000);
  const bool first_order = std::abs(s1 - 1.0) <= 0.2 && std::abs(s2 - 1.0) <= 0.2;
  return {exact && first_order, std::string(exact ? "constant field exact" : "constant field inexact") +
                                    ", slopes " + fmt("%.3f", s1) + " / " + fmt("%.3f", s2)};
}

// 7. Gate state machine: 12 scripted scenarios, exact decision sequences.
class FullGrounder : public aids::Grounder {
 public:
  aids::GroundingResult ground(const scene::Frame& f, int, const scene::InstructionId&) const override {
    aids::Mask m(f.height, f.width);
    std::fill(m.on.begin(), m.on.end(), 1);
    return {m, m};
  }
};

Outcome gate_suite() {
  struct Scenario {
    const char* name;
    std::vector<int> drops;     // per frame, 100 anchors
    std::string expected;       // one letter per frame 1..N-1: k keep, a re_anchor, g re_ground
  };
  // tau = 0.5, delta = 0.4; s resets to 1 after any intervention.
  const std::vector<Scenario> scenarios{
      {"neither", {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, "kkkkkkkkkkk"},
      {"slow loss stays above tau", {0, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4}, "kkkkkkkkkkk"},
      {"pure drift", {0, 8, 8, 8, 8, 8, 8, 8, 8, 8, 8, 8}, "kkkkkkakkkk"},
      {"pure collapse", {0, 0, 0, 60, 0, 0, 0, 0, 0, 0, 0, 0}, "kkgkkkkkkkk"},
      {"both at once", {0, 10, 60, 0, 0, 0, 0, 0, 0, 0, 0, 0}, "kgkkkkkkkkk"},
      {"s exactly tau", {0, 10, 10, 10, 10, 10, 1, 0, 0, 0, 0, 0}, "kkkkkakkkkk"},
      {"ds exactly -delta", {0, 0, 40, 0, 0, 0, 0, 0, 0, 0, 0, 0}, "kkkkkkkkkkk"},
      {"ds just past -delta", {0, 0, 41, 0, 0, 0, 0, 0, 0, 0, 0, 0}, "kgkkkkkkkkk"},
      {"drift then collapse", {0, 15, 15, 15, 15, 0, 70, 0, 0, 0, 0, 0}, "kkkakgkkkkk"},
      {"total loss", {0, 0, 0, 0, 100, 0, 0, 0, 0, 0, 0, 0}, "kkkgkkkkkkk"},
      {"repeated drift", {0, 20, 20, 20, 20, 20, 20, 20, 20, 20, 20, 20}, "kkakkakkakk"},
      {"collapse then drift", {0, 45, 0, 30, 25, 0, 0, 0, 0, 0, 0, 0}, "gkkakkkkkkk"},
  };
  int ok = 0;
  std::string failures;
  for (const auto& sc : scenarios) {
    aids::PerceptionSuite suite;
    suite.grounder = std::make_shared<FullGrounder>();
    suite.tracker = std::make_shared<aids::ScriptedTracker>(sc.drops);
    suite.pose = std::make_shared<aids::PointCloudPoseEstimator>(CameraIntrinsics{16, 16, 7.5, 7.5});
    suite.grasp = std::make_shared<aids::AnalyticGraspProposer>();
    aids::AidsConfig cfg;
    cfg.anchor_count = 100;
    std::vector<scene::Frame> frames(sc.drops.size());
    for (auto& f : frames) {
      f.height = f.width = 16;
      f.rgb.assign(16 * 16 * 3, 0.f);
      f.depth.assign(16 * 16, 1.0);
    }
    aids::Mask full(16, 16);
    std::fill(full.on.begin(), full.on.end(), 1);
    const auto res = aids::track_rollout(frames, full, {}, suite, cfg);
    std::string got;
    for (const auto& e : res.events)
      got += e.decision == aids::GateDecision::Keep ? 'k' : e.decision == aids::GateDecision::ReAnchor ? 'a' : 'g';
    if (got == sc.expected)
      ++ok;
    else
      failures += std::string(" [") + sc.name + ": " + got + " != " + sc.expected + "]";
  }
  return {ok == static_cast<int>(scenarios.size()),
          std::to_string(ok) + "/" + std::to_string(scenarios.size()) + " scenarios exact" + failures};
}

// 8. AIDS oracle identity (< 1e-6 m / rad before smoothing) and the outlier bound.
Outcome aids_oracle() {
  scene::SceneGenParams gp;
  gp.height = gp.width = 48;
  gp.frames = 10;
  gp.num_tracks = 16;
  double worst_t = 0, worst_r = 0, worst_ratio = 0;
  int rejected = 0, outliers = 0, mismatched = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const scene::Rollout r = scene::generate_rollout(scene::random_scene(gp, 700 + seed));
    auto suite = [&](aids::OraclePoseKnobs k) {
      aids::PerceptionSuite s;
      s.grounder = std::make_shared<aids::OracleGrounder>(r.config.end_effector.id);
      s.tracker = std::make_shared<aids::OracleTracker>(r);
      s.pose = std::make_shared<aids::OraclePoseEstimator>(r, std::move(k));
      s.grasp = std::make_shared<aids::AnalyticGraspProposer>();
      return s;
    };
    const auto clean = aids::extract(r.frames, r.config.instruction, suite({}), aids::AidsConfig{}, r.config.intrinsics,
                                     r.config.end_effector);
    for (std::size_t t = 0; t < r.frames.size(); ++t) {
      const RigidTransform truth = r.frames[t].ee_in_camera();
      worst_t = std::max(worst_t, (clean.trajectory[t].pose.T() - truth.T()).norm());
      worst_r = std::max(worst_r, geodesic_distance(clean.trajectory[t].pose.R(), truth.R()));
    }

    aids::OraclePoseKnobs k;
    k.outlier_rate = 0.2;
    k.seed = seed;
    const aids::OraclePoseEstimator probe(r, k);
    const auto noisy = aids::extract(r.frames, r.config.instruction, suite(k), aids::AidsConfig{}, r.config.intrinsics,
                                     r.config.end_effector);
    // Accepted frames carry the exact pose; rejected ones the EE-mask centroid, which
    // lies inside the EE's bounding sphere.
    const double bound = r.config.end_effector.bounding_radius();
    for (std::size_t t = 0; t < r.frames.size(); ++t) {
      const bool out = probe.is_outlier(static_cast<int>(t));
      outliers += out;
      rejected += !noisy.estimates[t].accepted;
      mismatched += noisy.estimates[t].accepted == out;
      const double err = (noisy.trajectory[t].pose.T() - r.frames[t].ee_in_camera().T()).norm();
      worst_ratio = std::max(worst_ratio, noisy.estimates[t].accepted ? err / 1e-6 : err / bound);
    }
  }
  const bool pass = worst_t < 1e-6 && worst_r < 1e-6 && worst_ratio <= 1.0 && mismatched == 0 && outliers > 0;
  return {pass, "clean max error " + fmt("%.2g", worst_t) + " m / " + fmt("%.2g", worst_r) + " rad; " +
                    std::to_string(outliers) + " outliers, " + std::to_string(rejected) +
                    " rejected, worst error / bound " + fmt("%.3f", worst_ratio)};
}

// 9. Metric identities.
Outcome metric_identities() {
  scene::SceneGenParams gp;
  gp.height = gp.width = 32;
  gp.frames = 4;
  gp.num_tracks = 24;
  const auto r = scene::generate_rollout(scene::random_scene(gp, 42));
  const auto rep = metrics::evaluate_rollout(r, r, r.config.intrinsics);
  const bool ident = rep.absrel == 0.0 && rep.chamfer_l1 == 0.0 && std::abs(rep.ssim - 1.0) < 1e-12 &&
                     rep.track_delta_avg == 1.0;

  std::vector<std::vector<Pixel>> gt, pred;
  std::vector<std::vector<bool>> vis;
  for (const auto& tr : r.tracks) {
    std::vector<Pixel> g, p;
    std::vector<bool> v;
    for (const auto& s : tr.samples) {
      g.push_back(s.pixel);
      p.push_back({s.pixel.u + 3.0, s.pixel.v});
      v.push_back(s.visible);
    }
    gt.push_back(g), pred.push_back(p), vis.push_back(v);
  }
  const double offset = metrics::track_delta_avg(pred, gt, vis);

  std::vector<double> depth, d12, d13;
  for (const auto& f : r.frames)
    for (double d : f.depth)
      if (d > 0) depth.push_back(d), d12.push_back(1.2 * d), d13.push_back(1.3 * d);
  const double a = metrics::delta_acc(d12, depth, 1.25, false), b = metrics::delta_acc(d13, depth, 1.25, false);
  return {ident && offset == 0.6 && a == 1.0 && b == 0.0,
          "gt-vs-gt absrel " + fmt("%.3g", rep.absrel) + " chamfer " + fmt("%.3g", rep.chamfer_l1) + " ssim " +
              fmt("%.6f", rep.ssim) + " track " + fmt("%.3g", rep.track_delta_avg) + "; 3 px offset " +
              fmt("%.17g", offset) + "; delta1 " + fmt("%.3g", a) + " / " + fmt("%.3g", b)};
}

// 10. Smoke pipeline through the CLI, twice; byte-identical, < 10 min.
std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

Outcome smoke_determinism(const Options& opt) {
  if (opt.cli.empty() || opt.smoke_config.empty()) return {false, "needs --cli and --smoke-config"};
  const auto t0 = Clock::now();
  std::string failure;
  auto run = [&](const fs::path& root) {
    fs::remove_all(root);
    const std::string g = "\"" + opt.cli + "\"", c = " --config \"" + opt.smoke_config + "\"";
    const std::string r = "\"" + root.string() + "\"";
    const std::vector<std::string> cmds{
        g + " gen-data" + c + " --out " + r + "/data --jobs 2",
        g + " train " + r + "/data" + c + " --out " + r + "/train",
        g + " sample " + r + "/train/checkpoint.gwc " + r + "/data" + c + " --out " + r + "/pred --jobs 2",
        g + " eval " + r + "/pred " + r + "/data" + c + " --out " + r + "/eval --jobs 2",
        g + " extract-actions " + r + "/pred" + c + " --out " + r + "/actions --jobs 2",
    };
    for (const auto& cmd : cmds) {
      const int rc = std::system((cmd + " > /dev/null").c_str());
      if (rc != 0) {
        failure = "command failed (" + std::to_string(rc) + "): " + cmd;
        return false;
      }
    }
    return true;
  };
  const fs::path a = opt.work / "smoke_a", b = opt.work / "smoke_b";
  if (!run(a) || !run(b)) return {false, failure};
  int files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path other = b / fs::relative(e.path(), a);
    ++files;
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) ++differ;
  }
  int rows = -1;
  {
    std::istringstream csv(slurp(a / "eval" / "metrics.csv"));
    std::string line;
    rows = 0;
    while (std::getline(csv, line))
      if (!line.empty() && line.rfind("rollout,", 0) != 0 && line.rfind("mean,", 0) != 0) ++rows;
  }
  const double secs = seconds_since(t0);
  return {differ == 0 && files > 0 && rows == 4 && secs < 600.0,
          std::to_string(files) + " files, " + std::to_string(differ) + " differ, " + std::to_string(rows) +
              " eval rows, " + fmt("%.0f", secs) + " s for both runs"};
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << "missing value for " << a << "\n";
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--only") {
      std::stringstream ss(next());
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else if (a == "--cli") {
      opt.cli = next();
    } else if (a == "--smoke-config") {
      opt.smoke_config = next();
    } else if (a == "--work") {
      opt.work = next();
    } else if (a == "--report") {
      opt.report = next();
    } else {
      std::cerr << "unknown argument " << a << "\n";
      return 2;
    }
  }
  fs::create_directories(opt.work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"correspondence oracle", correspondence},
      {"gradient correctness", gradients},
      {"stop-gradient decomposition", decomposition},
      {"inference independence", inference_independence},
      {"geometry distillation (directional)", [&] { return distillation(opt); }},
      {"flow-matching sampler", sampler},
      {"gate state machine", gate_suite},
      {"AIDS oracle identity and outlier bound", aids_oracle},
      {"metric identities", metric_identities},
      {"smoke pipeline determinism", [&] { return smoke_determinism(opt); }},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[k].first << "): " << o.detail
              << std::endl;
  }
  return failed ? 1 : 0;
}
