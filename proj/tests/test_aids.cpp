#include <doctest.h>

#include <cmath>
#include <numbers>

#include "geoworld/aids.hpp"
#include "geoworld/error.hpp"

using namespace geoworld;
using namespace geoworld::aids;

namespace {

constexpr double kPi = std::numbers::pi;

Mat3 rz(double a) { return rotation_exp(Vec3(0, 0, a)); }

// Full-frame masks; propagation keeps the previous mask.
class FullGrounder : public Grounder {
 public:
  GroundingResult ground(const scene::Frame& f, int, const scene::InstructionId&) const override {
    Mask m(f.height, f.width);
    std::fill(m.on.begin(), m.on.end(), 1);
    return {m, m};
  }
};

std::vector<scene::Frame> blank_frames(int n, int size = 16) {
  std::vector<scene::Frame> frames(static_cast<std::size_t>(n));
  for (auto& f : frames) {
    f.height = f.width = size;
    f.rgb.assign(static_cast<std::size_t>(size) * size * 3, 0.f);
    f.depth.assign(static_cast<std::size_t>(size) * size, 1.0);
  }
  return frames;
}

TrackingResult scripted(std::vector<int> drops, int frames = 12) {
  PerceptionSuite suite;
  suite.grounder = std::make_shared<FullGrounder>();
  suite.tracker = std::make_shared<ScriptedTracker>(std::move(drops));
  suite.pose = std::make_shared<PointCloudPoseEstimator>(CameraIntrinsics{16, 16, 7.5, 7.5});
  suite.grasp = std::make_shared<AnalyticGraspProposer>();
  AidsConfig cfg;
  cfg.anchor_count = 100;
  const auto f = blank_frames(frames);
  Mask full(16, 16);
  std::fill(full.on.begin(), full.on.end(), 1);
  return track_rollout(f, full, {}, suite, cfg);
}

scene::Rollout small_rollout(std::uint64_t seed, int frames = 8) {
  scene::SceneGenParams gp;
  gp.height = gp.width = 48;
  gp.frames = frames;
  gp.num_tracks = 16;
  return scene::generate_rollout(scene::random_scene(gp, seed));
}

PerceptionSuite oracle_suite(const scene::Rollout& r, OraclePoseKnobs pose = {}) {
  PerceptionSuite s;
  s.grounder = std::make_shared<OracleGrounder>(r.config.end_effector.id);
  s.tracker = std::make_shared<OracleTracker>(r);
  s.pose = std::make_shared<OraclePoseEstimator>(r, std::move(pose));
  s.grasp = std::make_shared<AnalyticGraspProposer>();
  return s;
}

}  // namespace

TEST_CASE("gate: documented examples") {
  const GateConfig cfg;  // tau 0.5, delta 0.4
  TrackStep step;
  step.reliable.assign(100, false);
  std::fill(step.reliable.begin(), step.reliable.begin() + 40, true);
  step.pixels.assign(100, Pixel{0, 0});
  TrackerState prev{0, 100, 45, 0.45, 0.0};
  TrackerState next;
  CHECK(gate_step(prev, step, cfg, &next) == GateDecision::ReAnchor);
  CHECK(next.s == doctest::Approx(0.4));
  CHECK(next.ds == doctest::Approx(-0.05));

  CHECK(gate_decision(0.3, 0.3 - 0.9, cfg) == GateDecision::ReGround);
  CHECK(gate_decision(0.8, -0.05, cfg) == GateDecision::Keep);
  // Collapse wins when both conditions hold.
  CHECK(gate_decision(0.1, -0.5, cfg) == GateDecision::ReGround);
  // Strict comparisons at the boundaries.
  CHECK(gate_decision(0.5, 0.0, cfg) == GateDecision::Keep);
  CHECK(gate_decision(0.9, -0.4, cfg) == GateDecision::Keep);
}

TEST_CASE("gate: monotone in tau and delta") {
  const std::vector<std::pair<double, double>> trace{{1.0, 0.0}, {0.7, -0.3}, {0.45, -0.25}, {0.2, -0.5}, {0.55, 0.1}};
  for (double tau : {0.3, 0.5, 0.7})
    for (double lower : {0.1, 0.2}) {
      int hi = 0, lo = 0;
      for (auto [s, ds] : trace) {
        hi += gate_decision(s, ds, {tau, 0.4}) == GateDecision::ReAnchor;
        lo += gate_decision(s, ds, {tau - lower, 0.4}) == GateDecision::ReAnchor;
      }
      CHECK(lo <= hi);
    }
  for (double delta : {0.2, 0.3}) {
    int a = 0, b = 0;
    for (auto [s, ds] : trace) {
      a += gate_decision(s, ds, {0.5, delta}) == GateDecision::ReGround;
      b += gate_decision(s, ds, {0.5, delta + 0.2}) == GateDecision::ReGround;
    }
    CHECK(b <= a);
  }
}

TEST_CASE("track_rollout: scripted drift re-anchors once at frame 7") {
  std::vector<int> drops(12, 8);
  drops[0] = 0;
  const auto r = scripted(drops);
  REQUIRE(r.events.size() == 11);
  CHECK(r.count(GateDecision::ReAnchor) == 1);
  CHECK(r.count(GateDecision::ReGround) == 0);
  CHECK(r.events[6].frame == 7);
  CHECK(r.events[6].decision == GateDecision::ReAnchor);
  CHECK(r.events[6].s == doctest::Approx(0.44));
  CHECK(r.history[7].s == 1.0);
  CHECK(r.history[7].anchor_frame == 7);
  CHECK(r.history[8].s == doctest::Approx(0.92));
}

TEST_CASE("track_rollout: single mass drop re-grounds once") {
  std::vector<int> drops(12, 0);
  drops[4] = 60;
  const auto r = scripted(drops);
  CHECK(r.count(GateDecision::ReGround) == 1);
  CHECK(r.count(GateDecision::ReAnchor) == 0);
  CHECK(r.events[3].frame == 4);
  CHECK(r.events[3].decision == GateDecision::ReGround);
  CHECK(r.events[3].ds == doctest::Approx(-0.6));
}

TEST_CASE("track_rollout: oracle tracker without drops keeps every frame") {
  const auto r = small_rollout(3);
  const auto suite = oracle_suite(r);
  const auto g = ground_scene(r.frames[0], r.config.instruction, suite, r.config.end_effector);
  const auto tr = track_rollout(r.frames, g.ee, r.config.instruction, suite, AidsConfig{});
  CHECK(tr.count(GateDecision::ReAnchor) == 0);
  CHECK(tr.count(GateDecision::ReGround) == 0);
  CHECK(tr.masks.size() == r.frames.size());
}

TEST_CASE("ground_scene: oracle masks equal rendered ids") {
  const auto r = small_rollout(5);
  const auto suite = oracle_suite(r);
  const auto g = ground_scene(r.frames[0], r.config.instruction, suite, r.config.end_effector);
  const auto& f = r.frames[0];
  for (std::size_t i = 0; i < f.object_id.size(); ++i) {
    CHECK((g.object.on[i] != 0) == (f.object_id[i] == r.config.instruction.target_object));
    CHECK((g.ee.on[i] != 0) == (f.object_id[i] == r.config.end_effector.id));
  }
  const RigidTransform truth = f.ee_in_camera();
  CHECK((g.initial.pose.T() - truth.T()).norm() < 1e-12);
  CHECK(geodesic_distance(g.initial.pose.R(), truth.R()) < 1e-12);

  scene::InstructionId absent = r.config.instruction;
  absent.target_object = 42;
  CHECK_THROWS_AS(ground_scene(f, absent, suite, r.config.end_effector), GroundingError);
}

TEST_CASE("consistency_check examples") {
  FallbackConfig cfg;
  cfg.eps_t = 0.1;
  cfg.eps_R = 30.0 * kPi / 180.0;
  const RigidTransform a(rz(0.2), Vec3(0.1, 0.2, 0.5));
  CHECK(consistency_check(a, a, cfg));
  CHECK_FALSE(consistency_check(RigidTransform(a.R(), a.T() + Vec3(0.3, 0, 0)), a, cfg));
  CHECK_FALSE(consistency_check(RigidTransform(rz(0.2 + kPi / 3), a.T() + Vec3(1e-4, 0, 0)), a, cfg));
  CHECK(consistency_check(RigidTransform(rz(0.3), a.T() + Vec3(0.05, 0, 0)), a, cfg));
}

TEST_CASE("recover_translation examples") {
  const CameraIntrinsics K{10, 10, 2, 2};
  Mask m(5, 5);
  std::vector<double> depth(25, 0.0);
  CHECK_FALSE(recover_translation(depth, m, K).has_value());

  m.on[2 * 5 + 2] = 1;
  depth[2 * 5 + 2] = 1.0;
  auto c = recover_translation(depth, m, K);
  REQUIRE(c);
  CHECK((*c - Vec3(0, 0, 1)).norm() < 1e-15);

  m.on[0] = 1;  // invalid depth, ignored
  c = recover_translation(depth, m, K);
  REQUIRE(c);
  CHECK((*c - Vec3(0, 0, 1)).norm() < 1e-15);

  // Two pixels: the mean of their backprojections.
  const CameraIntrinsics K2{10, 10, 2, 2};
  Mask two(5, 5);
  std::vector<double> dd(25, 0.0);
  two.on[2 * 5 + 2] = 1;
  dd[2 * 5 + 2] = 1.0;
  two.on[2 * 5 + 3] = 1;
  dd[2 * 5 + 3] = 3.0;
  auto mean = recover_translation(dd, two, K2);
  REQUIRE(mean);
  const Vec3 expect = 0.5 * (Vec3(0, 0, 1) + Vec3(0.3, 0, 3));
  CHECK((*mean - expect).norm() < 1e-15);
}

TEST_CASE("recover_translation: oracle EE centroid within the EE bounding radius") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = small_rollout(seed);
    for (const auto& f : r.frames) {
      Mask m(f.height, f.width);
      for (std::size_t i = 0; i < f.object_id.size(); ++i) m.on[i] = f.object_id[i] == r.config.end_effector.id;
      if (m.empty()) continue;
      const auto c = recover_translation(f.depth, m, r.config.intrinsics);
      REQUIRE(c);
      CHECK((*c - f.ee_in_camera().T()).norm() <= r.config.end_effector.bounding_radius());
    }
  }
}

TEST_CASE("fill_rejected: slerp midpoint, boundaries, accepted frames untouched") {
  std::vector<FrameEstimate> est(3);
  est[0] = {RigidTransform(Mat3::Identity(), Vec3(0, 0, 1)), 0.9, true, std::nullopt};
  est[1] = {RigidTransform(rz(1.0), Vec3(9, 9, 9)), 0.1, false, Vec3(1, 2, 3)};
  est[2] = {RigidTransform(rz(kPi / 2), Vec3(0, 0, 2)), 0.9, true, std::nullopt};
  auto t = fill_rejected(est);
  CHECK(geodesic_distance(t[1].pose.R(), rz(kPi / 4)) < 1e-12);
  CHECK((t[1].pose.T() - Vec3(1, 2, 3)).norm() == 0.0);
  CHECK(t[1].provenance == Provenance::CentroidSlerp);
  CHECK(t[0].pose.R() == est[0].pose.R());
  CHECK(t[0].pose.T() == est[0].pose.T());
  CHECK(t[2].pose.R() == est[2].pose.R());

  // Missing centroid interpolates translation.
  est[1].centroid.reset();
  t = fill_rejected(est);
  CHECK((t[1].pose.T() - Vec3(0, 0, 1.5)).norm() < 1e-15);

  // Trailing and leading rejected frames copy the nearest accepted rotation.
  std::vector<FrameEstimate> e2(4);
  e2[0] = {RigidTransform(rz(0.3), Vec3::Zero()), 0.1, false, Vec3(1, 0, 0)};
  e2[1] = {RigidTransform(rz(0.5), Vec3::Zero()), 0.9, true, std::nullopt};
  e2[2] = {RigidTransform(rz(0.7), Vec3::Zero()), 0.9, true, std::nullopt};
  e2[3] = {RigidTransform(rz(2.0), Vec3::Zero()), 0.1, false, std::nullopt};
  t = fill_rejected(e2);
  CHECK(geodesic_distance(t[0].pose.R(), rz(0.5)) < 1e-15);
  CHECK(geodesic_distance(t[3].pose.R(), rz(0.7)) < 1e-15);
  CHECK((t[3].pose.T() - Vec3::Zero()).norm() == 0.0);

  for (auto& e : e2) e.accepted = false;
  CHECK_THROWS_AS(fill_rejected(e2), InvalidInputError);
}

TEST_CASE("select_grasp examples") {
  const RigidTransform ref(Mat3::Identity(), Vec3(0, 0, 1));
  CHECK(select_grasp({ref}, ref, 1, 1) == 0);
  const RigidTransform a(Mat3::Identity(), Vec3(0.1, 0, 1));
  const RigidTransform b(rz(0.5), Vec3(0, 0, 1));
  CHECK(grasp_score(a, ref, 1, 1) == doctest::Approx(0.1));
  CHECK(grasp_score(b, ref, 1, 1) == doctest::Approx(0.5));
  CHECK(select_grasp({b, a}, ref, 1, 1) == 1);
  CHECK(select_grasp({a, a}, ref, 1, 1) == 0);
  CHECK_THROWS_AS(select_grasp({}, ref, 1, 1), InvalidInputError);
  CHECK_THROWS_AS(select_grasp({a}, ref, 0, 0), InvalidInputError);

  // Inactive translation term: scaling translations never changes the choice.
  std::vector<RigidTransform> c, scaled;
  for (int i = 0; i < 6; ++i) {
    const RigidTransform p(rz(0.4 * i - 1.0), Vec3(0.1 * i, -0.2 * i, 0.3));
    c.push_back(p);
    scaled.push_back(RigidTransform(p.R(), 7.0 * p.T()));
  }
  CHECK(select_grasp(c, ref, 0, 1) == select_grasp(scaled, ref, 0, 1));
  for (double k : {0.01, 3.0, 100.0}) CHECK(select_grasp(c, ref, 0.4 * k, 0.3 * k) == select_grasp(c, ref, 0.4, 0.3));
}

TEST_CASE("synthesize_actions: window 1 with the reference as grasp is the identity") {
  EETrajectory traj;
  for (int k = 0; k < 6; ++k) traj.push_back({RigidTransform(rz(0.1 * k), Vec3(0.01 * k, 0.02, 0.5)), Provenance::Accepted, 0.9});
  const auto out = synthesize_actions(traj, traj[3].pose, 3, 1);
  REQUIRE(out.size() == 5);
  for (int k = 0; k < 5; ++k) {
    CHECK(out[static_cast<std::size_t>(k)].frame == k + 1);
    CHECK((out[static_cast<std::size_t>(k)].pose.T() - traj[static_cast<std::size_t>(k + 1)].pose.T()).norm() < 1e-15);
    CHECK(geodesic_distance(out[static_cast<std::size_t>(k)].pose.R(), traj[static_cast<std::size_t>(k + 1)].pose.R()) < 1e-12);
    CHECK(out[static_cast<std::size_t>(k)].gripper_open == (k + 1 < 3));
  }
  CHECK(out[2].provenance == "grasp");
  CHECK_THROWS_AS(synthesize_actions(traj, traj[3].pose, 3, 2), ConfigError);
  CHECK_THROWS_AS(synthesize_actions(traj, traj[3].pose, 3, 7), ConfigError);
}

TEST_CASE("synthesize_actions: straight lines stay straight") {
  EETrajectory traj;
  const Vec3 p0(0.1, -0.2, 0.6), dir(0.3, 0.1, -0.2);
  for (int k = 0; k < 9; ++k) traj.push_back({RigidTransform(Mat3::Identity(), p0 + 0.1 * k * dir), Provenance::Accepted, 1.0});
  const int ref = 4;
  const auto out = synthesize_actions(traj, RigidTransform(Mat3::Identity(), p0 + 0.37 * dir), ref, 5);
  for (const auto& w : out) {
    const Vec3 d = w.pose.T() - p0;
    CHECK(d.cross(dir).norm() < 1e-14);
  }
}

TEST_CASE("synthesize_actions: hand-computed five-frame case") {
  EETrajectory traj;
  for (int k = 0; k < 5; ++k) traj.push_back({RigidTransform(Mat3::Identity(), Vec3(k, 0, 0)), Provenance::Accepted, 1.0});
  const RigidTransform grasp(rz(0.2), Vec3(10, 0, 0));
  const auto out = synthesize_actions(traj, grasp, 2, 3);
  REQUIRE(out.size() == 4);
  const double tx[] = {5.5, 10.0, 17.0 / 3.0, 3.5};
  const double ang[] = {0.1, 0.2, 0.2 / 3.0, 0.0};
  const bool open[] = {true, false, false, false};
  for (int k = 0; k < 4; ++k) {
    const auto& w = out[static_cast<std::size_t>(k)];
    CHECK(w.frame == k + 1);
    CHECK((w.pose.T() - Vec3(tx[k], 0, 0)).norm() < 1e-14);
    CHECK(geodesic_distance(w.pose.R(), rz(ang[k])) < 1e-12);
    CHECK(w.gripper_open == open[k]);
  }
}

TEST_CASE("extract: oracle chain recovers the scripted trajectory") {
  for (std::uint64_t seed : {11, 12, 13}) {
    const auto r = small_rollout(seed);
    const auto res = extract(r.frames, r.config.instruction, oracle_suite(r), AidsConfig{}, r.config.intrinsics,
                             r.config.end_effector);
    REQUIRE(res.trajectory.size() == r.frames.size());
    for (std::size_t t = 0; t < r.frames.size(); ++t) {
      const RigidTransform truth = r.frames[t].ee_in_camera();
      CHECK((res.trajectory[t].pose.T() - truth.T()).norm() < 1e-6);
      CHECK(geodesic_distance(res.trajectory[t].pose.R(), truth.R()) < 1e-6);
      CHECK(res.trajectory[t].provenance == Provenance::Accepted);
    }
    CHECK(res.actions.size() == r.frames.size() - 1);
    const auto j = trajectory_json(res.actions);
    CHECK(j["waypoints"].size() == r.frames.size() - 1);
    CHECK(res.diagnostics.events.size() > r.frames.size());
  }
}

TEST_CASE("extract: injected outliers are rejected and filled within the EE radius") {
  for (std::uint64_t seed : {21, 22}) {
    const auto r = small_rollout(seed, 10);
    OraclePoseKnobs k;
    k.outlier_frames = {2, 5, 8};  // 3 of 10 plus ~20% random
    k.outlier_rate = 0.2;
    k.seed = seed;
    const OraclePoseEstimator probe(r, k);
    const auto res = extract(r.frames, r.config.instruction, oracle_suite(r, k), AidsConfig{}, r.config.intrinsics,
                             r.config.end_effector);
    const double bound = r.config.end_effector.bounding_radius();
    for (std::size_t t = 0; t < r.frames.size(); ++t) {
      const RigidTransform truth = r.frames[t].ee_in_camera();
      const double err = (res.trajectory[t].pose.T() - truth.T()).norm();
      CHECK(res.estimates[t].accepted == !probe.is_outlier(static_cast<int>(t)));
      if (res.estimates[t].accepted)
        CHECK(err < 1e-6);
      else
        CHECK(err <= bound);
    }
  }
}

TEST_CASE("extract: depth-only translations when every interior frame is rejected") {
  const auto r = small_rollout(31, 8);
  OraclePoseKnobs k;
  k.kappa_inlier = 0.1;  // below kappa*, so only the consistency check can accept
  for (int t = 1; t < 7; ++t) k.outlier_frames.push_back(t);
  auto suite = oracle_suite(r, k);
  AidsConfig cfg;
  // Frame 0 has no reference and is rejected; accept the endpoints via a confident estimator.
  class Endpoints : public PoseEstimator {
   public:
    Endpoints(const scene::Rollout& r, OraclePoseKnobs k) : inner_(r, std::move(k)), n_(static_cast<int>(r.frames.size())) {}
    PoseEstimate estimate(const scene::Frame& f, int t, const Mask& m, const scene::EndEffectorSpec& s) const override {
      auto e = inner_.estimate(f, t, m, s);
      if (t == 0 || t == n_ - 1) e.kappa = 1.0;
      return e;
    }

   private:
    OraclePoseEstimator inner_;
    int n_;
  };
  suite.pose = std::make_shared<Endpoints>(r, k);
  const auto res = extract(r.frames, r.config.instruction, suite, cfg, r.config.intrinsics, r.config.end_effector);
  for (std::size_t t = 1; t + 1 < r.frames.size(); ++t) {
    CHECK_FALSE(res.estimates[t].accepted);
    CHECK((res.trajectory[t].pose.T() - r.frames[t].ee_in_camera().T()).norm() <= r.config.end_effector.bounding_radius());
  }
}

TEST_CASE("extract: empty instruction target is a grounding failure") {
  const auto r = small_rollout(7);
  scene::InstructionId bad = r.config.instruction;
  bad.target_object = 9;
  CHECK_THROWS_AS(extract(r.frames, bad, oracle_suite(r), AidsConfig{}, r.config.intrinsics, r.config.end_effector),
                  GroundingError);
}

TEST_CASE("color grounder recovers rendered ids on clean frames") {
  const auto r = small_rollout(4);
  const ColorGrounder g(3, r.config.end_effector);
  const auto& f = r.frames[0];
  const auto lab = g.labels(f);
  int agree = 0, total = 0;
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (f.object_id[i] == scene::kMissId) continue;
    ++total;
    agree += lab[i] == f.object_id[i];
  }
  CHECK(agree >= 0.95 * total);
  const auto gr = g.ground(f, 0, r.config.instruction);
  CHECK_FALSE(gr.object.empty());
  CHECK_FALSE(gr.ee.empty());
}

TEST_CASE("block-match tracker follows a static scene exactly") {
  auto r = small_rollout(8);
  const auto frames = std::vector<scene::Frame>(4, r.frames[0]);
  const BlockMatchTracker bm;
  const std::vector<Pixel> seeds{{10, 10}, {20, 24}, {30, 12}};
  auto s = bm.start(frames, 0, seeds);
  for (int t = 1; t < 4; ++t) {
    const auto step = s->advance(t);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      CHECK(step.reliable[i]);
      CHECK(step.pixels[i].u == seeds[i].u);
      CHECK(step.pixels[i].v == seeds[i].v);
    }
  }
}

TEST_CASE("aids config round-trips and validates") {
  AidsConfig c;
  c.gate.tau = 0.3;
  c.smoothing_window = 5;
  c.seed = 9;
  const auto back = aids_config_from_json(to_json(c));
  CHECK(back.gate.tau == 0.3);
  CHECK(back.smoothing_window == 5);
  CHECK(back.seed == 9);
  CHECK_THROWS_AS(aids_config_from_json({{"gate", {{"tau", 1.5}}}}), ConfigError);
  CHECK_THROWS_AS(aids_config_from_json({{"smoothing_window", 4}}), ConfigError);
}
