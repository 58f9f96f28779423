#include "geoworld/aids.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "geoworld/error.hpp"
#include "geoworld/rng.hpp"

namespace geoworld::aids {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t index_of(int u, int v, int width) { return static_cast<std::size_t>(v) * width + u; }

int round_px(double x) { return static_cast<int>(std::lround(x)); }

bool has_ids(const scene::Frame& f) {
  return f.object_id.size() == static_cast<std::size_t>(f.height) * f.width;
}

double median_of(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

Mask shift_mask(const Mask& m, int du, int dv) {
  Mask out(m.height, m.width);
  for (int v = 0; v < m.height; ++v)
    for (int u = 0; u < m.width; ++u) {
      if (!m.on[index_of(u, v, m.width)]) continue;
      const int a = u + du, b = v + dv;
      if (a >= 0 && a < m.width && b >= 0 && b < m.height) out.on[index_of(a, b, m.width)] = 1;
    }
  return out;
}

}  // namespace

// -- masks -------------------------------------------------------------------------

int Mask::count() const {
  int n = 0;
  for (auto b : on) n += b ? 1 : 0;
  return n;
}

bool Mask::at(int u, int v) const {
  return u >= 0 && v >= 0 && u < width && v < height && on[index_of(u, v, width)];
}

// -- grounders -----------------------------------------------------------------------

Mask Grounder::propagate(const scene::Frame&, const scene::Frame&, int, const Mask& prev_mask,
                         const std::vector<Pixel>& prev_points, const std::vector<Pixel>& next_points) const {
  std::vector<double> du, dv;
  for (std::size_t i = 0; i < prev_points.size() && i < next_points.size(); ++i) {
    const double a = next_points[i].u - prev_points[i].u, b = next_points[i].v - prev_points[i].v;
    if (std::isfinite(a) && std::isfinite(b)) du.push_back(a), dv.push_back(b);
  }
  if (du.empty()) return prev_mask;
  return shift_mask(prev_mask, round_px(median_of(du)), round_px(median_of(dv)));
}

GroundingResult OracleGrounder::ground(const scene::Frame& f, int, const scene::InstructionId& instruction) const {
  if (!has_ids(f)) throw InvalidInputError("oracle grounder needs ground-truth object ids");
  GroundingResult r{Mask(f.height, f.width), Mask(f.height, f.width)};
  for (std::size_t i = 0; i < f.object_id.size(); ++i) {
    if (f.object_id[i] == instruction.target_object) r.object.on[i] = 1;
    if (f.object_id[i] == ee_id_) r.ee.on[i] = 1;
  }
  return r;
}

Mask OracleGrounder::propagate(const scene::Frame&, const scene::Frame& next, int, const Mask&,
                               const std::vector<Pixel>&, const std::vector<Pixel>&) const {
  if (!has_ids(next)) throw InvalidInputError("oracle grounder needs ground-truth object ids");
  Mask m(next.height, next.width);
  for (std::size_t i = 0; i < next.object_id.size(); ++i) m.on[i] = next.object_id[i] == ee_id_;
  return m;
}

ColorGrounder::ColorGrounder(int max_objects, scene::EndEffectorSpec ee, Vec3 background, double max_distance)
    : max_objects_(max_objects), ee_(std::move(ee)), background_(background), max_distance_(max_distance) {
  if (max_objects < 1) throw ConfigError("color grounder: max_objects must be >= 1");
  if (!(max_distance > 0)) throw ConfigError("color grounder: max_distance must be positive");
}

std::vector<int> ColorGrounder::labels(const scene::Frame& f) const {
  std::vector<std::pair<int, Vec3>> palette{{scene::kBackgroundId, background_}};
  for (int k = 1; k <= max_objects_; ++k) palette.emplace_back(k, scene::slot_color(k));
  palette.emplace_back(ee_.id, ee_.color);
  std::vector<int> out(static_cast<std::size_t>(f.height) * f.width, -1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vec3 c(f.rgb[3 * i], f.rgb[3 * i + 1], f.rgb[3 * i + 2]);
    double best = max_distance_;
    for (const auto& [id, col] : palette) {
      const double d = (c - col).norm();
      if (d < best) best = d, out[i] = id;
    }
  }
  return out;
}

GroundingResult ColorGrounder::ground(const scene::Frame& f, int, const scene::InstructionId& instruction) const {
  const auto lab = labels(f);
  GroundingResult r{Mask(f.height, f.width), Mask(f.height, f.width)};
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (lab[i] == instruction.target_object) r.object.on[i] = 1;
    if (lab[i] == ee_.id) r.ee.on[i] = 1;
  }
  return r;
}

Mask ColorGrounder::propagate(const scene::Frame& prev, const scene::Frame& next, int t, const Mask& prev_mask,
                              const std::vector<Pixel>& prev_points, const std::vector<Pixel>& next_points) const {
  // EE-colored pixels near the keypoint-shifted mask.
  const Mask shifted = Grounder::propagate(prev, next, t, prev_mask, prev_points, next_points);
  const auto lab = labels(next);
  constexpr int reach = 4;
  Mask out(next.height, next.width);
  for (int v = 0; v < next.height; ++v)
    for (int u = 0; u < next.width; ++u) {
      if (lab[index_of(u, v, next.width)] != ee_.id) continue;
      bool near = false;
      for (int b = std::max(0, v - reach); b <= std::min(next.height - 1, v + reach) && !near; ++b)
        for (int a = std::max(0, u - reach); a <= std::min(next.width - 1, u + reach) && !near; ++a)
          near = shifted.on[index_of(a, b, next.width)] != 0;
      if (near) out.on[index_of(u, v, next.width)] = 1;
    }
  return out.empty() ? shifted : out;
}

nlohmann::json ColorGrounder::knobs() const { return {{"max_distance", max_distance_}}; }

// -- trackers ------------------------------------------------------------------------

namespace {

class OracleSession : public TrackSession {
 public:
  OracleSession(const scene::Rollout& r, const OracleTrackerKnobs& k, int t0, const std::vector<Pixel>& seeds)
      : r_(r), k_(k), t0_(t0), rng_(k.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(t0 + 1))) {
    const scene::Frame& f = r.frames.at(static_cast<std::size_t>(t0));
    if (!has_ids(f)) throw InvalidInputError("oracle tracker needs a ground-truth rollout");
    for (const auto& p : seeds) {
      const int u = std::clamp(round_px(p.u), 0, f.width - 1), v = std::clamp(round_px(p.v), 0, f.height - 1);
      const std::size_t i = index_of(u, v, f.width);
      Point pt;
      pt.id = f.object_id[i];
      if (pt.id == scene::kMissId || !(f.depth[i] > 0)) {
        pt.id = scene::kMissId;
      } else {
        const Vec3 world = invert(f.camera).apply(backproject(p, f.depth[i], r.config.intrinsics));
        pt.local = invert(scene::object_pose_by_id(r.config, pt.id, t0)).apply(world);
      }
      pt.alive = pt.id != scene::kMissId;
      points_.push_back(pt);
    }
  }

  TrackStep advance(int t) override {
    TrackStep s;
    const scene::Frame& f = r_.frames.at(static_cast<std::size_t>(t));
    for (auto& pt : points_) {
      if (pt.alive && k_.drop_rate > 0 && rng_.uniform() < k_.drop_rate) pt.alive = false;
      Pixel px{kNaN, kNaN};
      bool ok = false;
      if (pt.id != scene::kMissId) {
        const Vec3 world = scene::object_pose_by_id(r_.config, pt.id, t).apply(pt.local);
        if (const auto q = project(f.camera.apply(world), r_.config.intrinsics)) {
          px = {q->u + k_.drift_px * (t - t0_), q->v};
          ok = true;
        }
      }
      s.pixels.push_back(px);
      s.reliable.push_back(pt.alive && ok);
    }
    return s;
  }

 private:
  struct Point {
    int id = scene::kMissId;
    Vec3 local = Vec3::Zero();
    bool alive = false;
  };
  const scene::Rollout& r_;
  OracleTrackerKnobs k_;
  int t0_;
  Rng rng_;
  std::vector<Point> points_;
};

class ScriptedSession : public TrackSession {
 public:
  ScriptedSession(const std::vector<int>& drops, const std::vector<Pixel>& seeds)
      : drops_(drops), seeds_(seeds), alive_(static_cast<int>(seeds.size())) {}
  TrackStep advance(int t) override {
    if (t >= 0 && static_cast<std::size_t>(t) < drops_.size()) alive_ = std::max(0, alive_ - drops_[static_cast<std::size_t>(t)]);
    TrackStep s;
    s.pixels = seeds_;
    for (int i = 0; i < static_cast<int>(seeds_.size()); ++i) s.reliable.push_back(i < alive_);
    return s;
  }

 private:
  const std::vector<int>& drops_;
  std::vector<Pixel> seeds_;
  int alive_;
};

class BlockMatchSession : public TrackSession {
 public:
  BlockMatchSession(const std::vector<scene::Frame>& frames, const BlockMatchKnobs& k, int t0,
                    const std::vector<Pixel>& seeds)
      : frames_(frames), k_(k), last_(t0) {
    for (const auto& p : seeds) {
      const bool ok = std::isfinite(p.u) && std::isfinite(p.v);
      const Pixel q = ok ? Pixel{double(round_px(p.u)), double(round_px(p.v))} : Pixel{0, 0};
      pos_.push_back(q);
      frac_.push_back(ok ? Pixel{p.u - q.u, p.v - q.v} : Pixel{kNaN, kNaN});
      alive_.push_back(ok);
    }
  }

  TrackStep advance(int t) override {
    const scene::Frame& a = frames_.at(static_cast<std::size_t>(last_));
    const scene::Frame& b = frames_.at(static_cast<std::size_t>(t));
    last_ = t;
    for (std::size_t i = 0; i < pos_.size(); ++i) {
      if (!alive_[i]) continue;
      const int u0 = static_cast<int>(pos_[i].u), v0 = static_cast<int>(pos_[i].v);
      double best = std::numeric_limits<double>::infinity();
      int bu = u0, bv = v0;
      for (int dv = -k_.search; dv <= k_.search; ++dv)
        for (int du = -k_.search; du <= k_.search; ++du) {
          const double c = cost(a, b, u0, v0, u0 + du, v0 + dv);
          // Prefer the smaller displacement on ties so static content stays put.
          if (c < best || (c == best && std::abs(du) + std::abs(dv) < std::abs(bu - u0) + std::abs(bv - v0)))
            best = c, bu = u0 + du, bv = v0 + dv;
        }
      if (!(best <= k_.max_cost)) {
        alive_[i] = false;
        continue;
      }
      pos_[i] = {static_cast<double>(bu), static_cast<double>(bv)};
    }
    TrackStep s;
    for (std::size_t i = 0; i < pos_.size(); ++i) s.pixels.push_back({pos_[i].u + frac_[i].u, pos_[i].v + frac_[i].v});
    s.reliable = alive_;
    return s;
  }

 private:
  double cost(const scene::Frame& a, const scene::Frame& b, int ua, int va, int ub, int vb) const {
    const int r = k_.radius;
    if (ub < 0 || vb < 0 || ub >= b.width || vb >= b.height) return std::numeric_limits<double>::infinity();
    double sum = 0;
    int n = 0;
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x) {
        const int xa = ua + x, ya = va + y, xb = ub + x, yb = vb + y;
        if (xa < 0 || ya < 0 || xa >= a.width || ya >= a.height) continue;
        if (xb < 0 || yb < 0 || xb >= b.width || yb >= b.height) continue;
        const std::size_t ia = index_of(xa, ya, a.width), ib = index_of(xb, yb, b.width);
        double d = 0;
        for (int c = 0; c < 3; ++c) {
          const double e = static_cast<double>(a.rgb[3 * ia + c]) - b.rgb[3 * ib + c];
          d += e * e;
        }
        const double dz = a.depth[ia] - b.depth[ib];
        sum += d + k_.depth_weight * dz * dz;
        ++n;
      }
    return n ? sum / n : std::numeric_limits<double>::infinity();
  }

  const std::vector<scene::Frame>& frames_;
  BlockMatchKnobs k_;
  int last_;
  std::vector<Pixel> pos_;
  std::vector<Pixel> frac_;
  std::vector<bool> alive_;
};

}  // namespace

OracleTracker::OracleTracker(const scene::Rollout& rollout, OracleTrackerKnobs knobs)
    : rollout_(&rollout), knobs_(knobs) {
  if (!rollout.ground_truth) throw InvalidInputError("oracle tracker needs a ground-truth rollout");
  if (!(knobs.drop_rate >= 0 && knobs.drop_rate <= 1)) throw ConfigError("oracle tracker: drop_rate must lie in [0, 1]");
}

std::unique_ptr<TrackSession> OracleTracker::start(const std::vector<scene::Frame>&, int t0,
                                                   const std::vector<Pixel>& seeds) const {
  return std::make_unique<OracleSession>(*rollout_, knobs_, t0, seeds);
}

nlohmann::json OracleTracker::knobs() const {
  return {{"drop_rate", knobs_.drop_rate}, {"drift_px", knobs_.drift_px}, {"seed", knobs_.seed}};
}

std::unique_ptr<TrackSession> ScriptedTracker::start(const std::vector<scene::Frame>&, int,
                                                     const std::vector<Pixel>& seeds) const {
  return std::make_unique<ScriptedSession>(drops_, seeds);
}

nlohmann::json ScriptedTracker::knobs() const { return {{"drops", drops_}}; }

std::unique_ptr<TrackSession> BlockMatchTracker::start(const std::vector<scene::Frame>& frames, int t0,
                                                       const std::vector<Pixel>& seeds) const {
  return std::make_unique<BlockMatchSession>(frames, knobs_, t0, seeds);
}

nlohmann::json BlockMatchTracker::knobs() const {
  return {{"radius", knobs_.radius}, {"search", knobs_.search}, {"depth_weight", knobs_.depth_weight},
          {"max_cost", knobs_.max_cost}};
}

// -- pose estimators -----------------------------------------------------------------

OraclePoseEstimator::OraclePoseEstimator(const scene::Rollout& rollout, OraclePoseKnobs knobs)
    : rollout_(&rollout), knobs_(std::move(knobs)) {
  if (!rollout.ground_truth) throw InvalidInputError("oracle pose estimator needs a ground-truth rollout");
}

bool OraclePoseEstimator::is_outlier(int t) const {
  if (std::find(knobs_.outlier_frames.begin(), knobs_.outlier_frames.end(), t) != knobs_.outlier_frames.end())
    return true;
  if (knobs_.outlier_rate <= 0) return false;
  Rng rng(knobs_.seed ^ (0xC2B2AE3D27D4EB4FULL * static_cast<std::uint64_t>(t + 1)));
  return rng.uniform() < knobs_.outlier_rate;
}

PoseEstimate OraclePoseEstimator::estimate(const scene::Frame&, int t, const Mask&,
                                           const scene::EndEffectorSpec&) const {
  const scene::Frame& f = rollout_->frames.at(static_cast<std::size_t>(t));
  RigidTransform pose = f.ee_in_camera();
  Rng rng(knobs_.seed ^ (0x165667B19E3779F9ULL * static_cast<std::uint64_t>(t + 1)));
  if (knobs_.translation_noise > 0 || knobs_.rotation_noise > 0) {
    const Vec3 dt(rng.normal(), rng.normal(), rng.normal());
    const Vec3 dr(rng.normal(), rng.normal(), rng.normal());
    pose = RigidTransform(rotation_exp(knobs_.rotation_noise * dr) * pose.R(), pose.T() + knobs_.translation_noise * dt,
                          1e-8);
  }
  if (is_outlier(t)) {
    // Fixed-magnitude jump in a seeded direction.
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    axis.normalize();
    pose = RigidTransform(rotation_exp(knobs_.outlier_rotation * axis) * pose.R(),
                          pose.T() + knobs_.outlier_translation * dir, 1e-8);
    return {pose, knobs_.kappa_outlier};
  }
  return {pose, knobs_.kappa_inlier};
}

nlohmann::json OraclePoseEstimator::knobs() const {
  return {{"translation_noise", knobs_.translation_noise}, {"rotation_noise", knobs_.rotation_noise},
          {"outlier_frames", knobs_.outlier_frames},         {"outlier_rate", knobs_.outlier_rate},
          {"outlier_translation", knobs_.outlier_translation}, {"outlier_rotation", knobs_.outlier_rotation},
          {"kappa_inlier", knobs_.kappa_inlier},             {"kappa_outlier", knobs_.kappa_outlier},
          {"seed", knobs_.seed}};
}

PoseEstimate PointCloudPoseEstimator::estimate(const scene::Frame& f, int, const Mask& mask,
                                               const scene::EndEffectorSpec& model) const {
  std::vector<Vec3> pts;
  for (int v = 0; v < f.height; ++v)
    for (int u = 0; u < f.width; ++u) {
      const std::size_t i = index_of(u, v, f.width);
      if (mask.at(u, v) && f.depth[i] > 0) pts.push_back(backproject({double(u), double(v)}, f.depth[i], K_));
    }
  if (pts.empty()) return {RigidTransform(), 0.0};
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  if (pts.size() < 3) return {RigidTransform::translation(c), 0.0};
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - c) * (p - c).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  Vec3 a1 = eig.eigenvectors().col(2), a2 = eig.eigenvectors().col(1);
  if (a1.x() < 0) a1 = -a1;
  if (a2.y() < 0) a2 = -a2;
  Mat3 R;
  R.col(0) = a1;
  R.col(1) = a2;
  R.col(2) = a1.cross(a2);
  const double r = model.bounding_radius() * K_.fx / std::max(c.z(), 1e-6);
  const double expected = coverage_ * std::numbers::pi * r * r;
  return {RigidTransform(R, c, 1e-6), std::clamp(static_cast<double>(pts.size()) / expected, 0.0, 1.0)};
}

std::vector<RigidTransform> AnalyticGraspProposer::propose(const std::vector<Vec3>& pts) const {
  if (pts.empty()) throw GroundingError("grasp proposer: empty object point cloud");
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  std::vector<RigidTransform> out;
  for (int i = 0; i < m_; ++i)
    out.push_back(RigidTransform::from_rotvec(Vec3(0, 0, 2.0 * std::numbers::pi * i / m_), c));
  return out;
}

nlohmann::json AnalyticGraspProposer::knobs() const { return {{"candidates", m_}}; }

void PerceptionSuite::validate() const {
  if (!grounder || !tracker || !pose || !grasp) throw ConfigError("perception suite is missing a backend");
}

// -- configuration ---------------------------------------------------------------------

void GateConfig::validate() const {
  if (!(tau > 0 && tau < 1)) throw ConfigError("gate: tau must lie in (0, 1)");
  if (!(delta > 0)) throw ConfigError("gate: delta must be positive");
}

void FallbackConfig::validate() const {
  if (!(kappa_star >= 0 && kappa_star <= 1)) throw ConfigError("fallback: kappa_star must lie in [0, 1]");
  if (!(eps_t > 0) || !(eps_R > 0)) throw ConfigError("fallback: eps_t and eps_R must be positive");
}

void GraspConfig::validate() const {
  if (!(lambda_t >= 0) || !(lambda_R >= 0) || (lambda_t == 0 && lambda_R == 0))
    throw ConfigError("grasp: weights must be non-negative and not both zero");
}

void AidsConfig::validate() const {
  gate.validate();
  fallback.validate();
  grasp.validate();
  if (smoothing_window < 1 || smoothing_window % 2 == 0) throw ConfigError("smoothing window must be odd and >= 1");
  if (anchor_count < 1) throw ConfigError("anchor_count must be >= 1");
  if (max_objects < 1) throw ConfigError("max_objects must be >= 1");
}

nlohmann::json to_json(const AidsConfig& c) {
  return {{"gate", {{"tau", c.gate.tau}, {"delta", c.gate.delta}}},
          {"fallback", {{"kappa_star", c.fallback.kappa_star}, {"eps_t", c.fallback.eps_t}, {"eps_R", c.fallback.eps_R}}},
          {"grasp", {{"lambda_t", c.grasp.lambda_t}, {"lambda_R", c.grasp.lambda_R}}},
          {"smoothing_window", c.smoothing_window},
          {"anchor_count", c.anchor_count},
          {"max_objects", c.max_objects},
          {"seed", c.seed}};
}

AidsConfig aids_config_from_json(const nlohmann::json& j) {
  AidsConfig c;
  try {
    if (j.contains("gate")) {
      c.gate.tau = j["gate"].value("tau", c.gate.tau);
      c.gate.delta = j["gate"].value("delta", c.gate.delta);
    }
    if (j.contains("fallback")) {
      c.fallback.kappa_star = j["fallback"].value("kappa_star", c.fallback.kappa_star);
      c.fallback.eps_t = j["fallback"].value("eps_t", c.fallback.eps_t);
      c.fallback.eps_R = j["fallback"].value("eps_R", c.fallback.eps_R);
    }
    if (j.contains("grasp")) {
      c.grasp.lambda_t = j["grasp"].value("lambda_t", c.grasp.lambda_t);
      c.grasp.lambda_R = j["grasp"].value("lambda_R", c.grasp.lambda_R);
    }
    c.smoothing_window = j.value("smoothing_window", c.smoothing_window);
    c.anchor_count = j.value("anchor_count", c.anchor_count);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("aids: ") + e.what());
  }
  c.validate();
  return c;
}

// -- gate ------------------------------------------------------------------------------

const char* decision_name(GateDecision d) {
  switch (d) {
    case GateDecision::Keep: return "keep";
    case GateDecision::ReAnchor: return "re_anchor";
    case GateDecision::ReGround: return "re_ground";
  }
  return "?";
}

GateDecision gate_decision(double s, double ds, const GateConfig& cfg) {
  if (ds < -cfg.delta) return GateDecision::ReGround;
  if (s < cfg.tau) return GateDecision::ReAnchor;
  return GateDecision::Keep;
}

GateDecision gate_step(const TrackerState& prev, const TrackStep& result, const GateConfig& cfg, TrackerState* next) {
  int reliable = 0;
  for (bool r : result.reliable) reliable += r ? 1 : 0;
  TrackerState st = prev;
  st.reliable_count = reliable;
  st.s = prev.anchor_count > 0 ? static_cast<double>(reliable) / prev.anchor_count : 0.0;
  st.ds = st.s - prev.s;
  const GateDecision d = gate_decision(st.s, st.ds, cfg);
  if (next) *next = st;
  return d;
}

int TrackingResult::count(GateDecision d) const {
  int n = 0;
  for (const auto& e : events) n += e.decision == d ? 1 : 0;
  return n;
}

std::vector<Pixel> sample_anchors(const Mask& mask, int count, std::uint64_t seed) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < mask.on.size(); ++i)
    if (mask.on[i]) idx.push_back(static_cast<int>(i));
  Rng rng(seed);
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(count, 0)), idx.size());
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<Pixel> out;
  for (int i : idx) out.push_back({static_cast<double>(i % mask.width), static_cast<double>(i / mask.width)});
  return out;
}

TrackingResult track_rollout(const std::vector<scene::Frame>& frames, const Mask& initial,
                             const scene::InstructionId& instruction, const PerceptionSuite& suite,
                             const AidsConfig& cfg) {
  suite.validate();
  cfg.validate();
  if (frames.empty()) throw InvalidInputError("track_rollout: no frames");
  std::vector<Pixel> anchors = sample_anchors(initial, cfg.anchor_count, cfg.seed);
  if (anchors.empty()) throw GroundingError("track_rollout: empty end-effector mask at frame 0");
  TrackingResult res;
  TrackerState state{0, static_cast<int>(anchors.size()), static_cast<int>(anchors.size()), 1.0, 0.0};
  res.masks.push_back(initial);
  res.history.push_back(state);
  auto session = suite.tracker->start(frames, 0, anchors);
  std::vector<Pixel> prev_px = anchors;
  for (int t = 1; t < static_cast<int>(frames.size()); ++t) {
    TrackStep step = session->advance(t);
    if (step.pixels.size() != prev_px.size() || step.reliable.size() != prev_px.size())
      throw InvalidInputError("tracker returned " + std::to_string(step.pixels.size()) + " points for " +
                              std::to_string(prev_px.size()) + " seeds at frame " + std::to_string(t));
    TrackerState next;
    const GateDecision d = gate_step(state, step, cfg.gate, &next);
    std::vector<Pixel> a, b;
    for (std::size_t i = 0; i < step.pixels.size(); ++i)
      if (step.reliable[i]) a.push_back(prev_px[i]), b.push_back(step.pixels[i]);
    const auto& prev_frame = frames[static_cast<std::size_t>(t - 1)];
    const auto& frame = frames[static_cast<std::size_t>(t)];
    Mask mask = suite.grounder->propagate(prev_frame, frame, t, res.masks.back(), a, b);
    if (d == GateDecision::ReGround) {
      Mask fresh = suite.grounder->ground(frame, t, instruction).ee;
      if (!fresh.empty()) mask = std::move(fresh);
    }
    res.events.push_back({t, d, next.s, next.ds});
    if (d != GateDecision::Keep) {
      std::vector<Pixel> fresh = sample_anchors(mask, cfg.anchor_count, cfg.seed + static_cast<std::uint64_t>(t));
      if (!fresh.empty()) {
        anchors = std::move(fresh);
        session = suite.tracker->start(frames, t, anchors);
        next = {t, static_cast<int>(anchors.size()), static_cast<int>(anchors.size()), 1.0, next.ds};
        prev_px = anchors;
      } else {
        prev_px = step.pixels;
      }
    } else {
      prev_px = step.pixels;
    }
    state = next;
    res.masks.push_back(std::move(mask));
    res.history.push_back(state);
  }
  return res;
}

// -- stages ------------------------------------------------------------------------------

Grounding ground_scene(const scene::Frame& frame0, const scene::InstructionId& instruction,
                       const PerceptionSuite& suite, const scene::EndEffectorSpec& model) {
  suite.validate();
  const GroundingResult g = suite.grounder->ground(frame0, 0, instruction);
  if (g.object.empty())
    throw GroundingError("target object " + std::to_string(instruction.target_object) + " not found in frame 0");
  if (g.ee.empty()) throw GroundingError("end effector not found in frame 0");
  return {g.object, g.ee, suite.pose->estimate(frame0, 0, g.ee, model)};
}

bool consistency_check(const RigidTransform& pose, const RigidTransform& previous, const FallbackConfig& cfg) {
  if ((pose.T() - previous.T()).norm() > cfg.eps_t) return false;
  if (geodesic_distance(pose.R(), previous.R()) > cfg.eps_R) return false;
  return true;
}

std::optional<Vec3> recover_translation(const std::vector<double>& depth, const Mask& mask, const CameraIntrinsics& K) {
  if (depth.size() != mask.on.size()) throw InvalidInputError("recover_translation: depth and mask sizes differ");
  Vec3 sum = Vec3::Zero();
  int n = 0;
  for (int v = 0; v < mask.height; ++v)
    for (int u = 0; u < mask.width; ++u) {
      const std::size_t i = index_of(u, v, mask.width);
      if (!mask.on[i] || !(depth[i] > 0) || !std::isfinite(depth[i])) continue;
      sum += backproject({double(u), double(v)}, depth[i], K);
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

const char* provenance_name(Provenance p) {
  return p == Provenance::Accepted ? "accepted" : "centroid+slerp";
}

EETrajectory fill_rejected(const std::vector<FrameEstimate>& est) {
  const int n = static_cast<int>(est.size());
  std::vector<int> accepted;
  for (int i = 0; i < n; ++i)
    if (est[static_cast<std::size_t>(i)].accepted) accepted.push_back(i);
  if (accepted.empty()) throw InvalidInputError("fill_rejected: no accepted frame");

  // Frames with a known translation: accepted poses and recovered centroids.
  auto known = [&](int i) { return est[static_cast<std::size_t>(i)].accepted || est[static_cast<std::size_t>(i)].centroid.has_value(); };
  auto translation = [&](int i) {
    const auto& e = est[static_cast<std::size_t>(i)];
    return e.accepted ? e.pose.T() : *e.centroid;
  };

  EETrajectory out;
  for (int i = 0; i < n; ++i) {
    const FrameEstimate& e = est[static_cast<std::size_t>(i)];
    if (e.accepted) {
      out.push_back({e.pose, Provenance::Accepted, e.kappa});
      continue;
    }
    int a = -1, b = -1;
    for (int j : accepted) {
      if (j < i) a = j;
      if (j > i && b < 0) b = j;
    }
    Mat3 R;
    if (a >= 0 && b >= 0) {
      R = slerp(est[static_cast<std::size_t>(a)].pose.R(), est[static_cast<std::size_t>(b)].pose.R(),
                static_cast<double>(i - a) / (b - a));
    } else {
      R = est[static_cast<std::size_t>(a >= 0 ? a : b)].pose.R();
    }
    Vec3 T;
    if (e.centroid) {
      T = *e.centroid;
    } else {
      int p = -1, q = -1;
      for (int j = i - 1; j >= 0 && p < 0; --j)
        if (known(j)) p = j;
      for (int j = i + 1; j < n && q < 0; ++j)
        if (known(j)) q = j;
      if (p >= 0 && q >= 0) {
        const double u = static_cast<double>(i - p) / (q - p);
        T = (1.0 - u) * translation(p) + u * translation(q);
      } else {
        T = translation(p >= 0 ? p : q);
      }
    }
    out.push_back({RigidTransform(R, T, 1e-8), Provenance::CentroidSlerp, e.kappa});
  }
  return out;
}

double grasp_score(const RigidTransform& c, const RigidTransform& ref, double lambda_t, double lambda_R) {
  return lambda_t * (c.T() - ref.T()).norm() + lambda_R * geodesic_distance(c.R(), ref.R());
}

std::size_t select_grasp(const std::vector<RigidTransform>& candidates, const RigidTransform& ref, double lambda_t,
                         double lambda_R) {
  if (candidates.empty()) throw InvalidInputError("select_grasp: no candidates");
  if (!(lambda_t >= 0) || !(lambda_R >= 0) || (lambda_t == 0 && lambda_R == 0))
    throw InvalidInputError("select_grasp: weights must be non-negative and not both zero");
  std::size_t best = 0;
  double best_score = grasp_score(candidates[0], ref, lambda_t, lambda_R);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double s = grasp_score(candidates[i], ref, lambda_t, lambda_R);
    if (s < best_score) best = i, best_score = s;
  }
  return best;
}

int reference_index(const EETrajectory& traj, const Vec3& target) {
  if (traj.size() < 2) throw InvalidInputError("reference_index: trajectory needs at least 2 frames");
  int best = 1;
  double best_d = (traj[1].pose.T() - target).norm();
  for (int t = 2; t < static_cast<int>(traj.size()); ++t) {
    const double d = (traj[static_cast<std::size_t>(t)].pose.T() - target).norm();
    if (d < best_d) best = t, best_d = d;
  }
  return best;
}

ActionSequence synthesize_actions(const EETrajectory& traj, const RigidTransform& grasp, int ref_index, int window) {
  const int n = static_cast<int>(traj.size());
  if (n < 2) throw InvalidInputError("synthesize_actions: trajectory needs at least 2 frames");
  if (ref_index < 1 || ref_index >= n) throw InvalidInputError("synthesize_actions: reference index out of range");
  if (window < 1 || window % 2 == 0) throw ConfigError("smoothing window must be odd and >= 1");
  if (window > n - 1)
    throw ConfigError("smoothing window " + std::to_string(window) + " exceeds the " + std::to_string(n - 1) +
                      " waypoints");
  if (!grasp.T().allFinite() || !grasp.R().allFinite()) throw InvalidInputError("synthesize_actions: grasp not finite");
  const int m = n - 1, g = ref_index - 1, half = window / 2;
  std::vector<RigidTransform> P;
  for (int k = 0; k < m; ++k) P.push_back(k == g ? grasp : traj[static_cast<std::size_t>(k + 1)].pose);
  ActionSequence out;
  for (int k = 0; k < m; ++k) {
    Waypoint w;
    w.frame = k + 1;
    w.gripper_open = k < g;
    w.kappa = traj[static_cast<std::size_t>(k + 1)].kappa;
    if (k == g) {
      w.pose = grasp;
      w.provenance = "grasp";
    } else {
      const int lo = std::max(0, k - half), hi = std::min(m - 1, k + half);
      Vec3 T = Vec3::Zero();
      Mat3 R = P[static_cast<std::size_t>(lo)].R();
      for (int j = lo; j <= hi; ++j) T += P[static_cast<std::size_t>(j)].T();
      for (int j = lo + 1, cnt = 2; j <= hi; ++j, ++cnt) R = slerp(R, P[static_cast<std::size_t>(j)].R(), 1.0 / cnt);
      w.pose = RigidTransform(R, T / (hi - lo + 1), 1e-8);
      w.provenance = provenance_name(traj[static_cast<std::size_t>(k + 1)].provenance);
    }
    out.push_back(std::move(w));
  }
  return out;
}

void Diagnostics::add(int frame, const std::string& stage, const std::string& decision, nlohmann::json values) {
  nlohmann::json e = {{"frame", frame}, {"stage", stage}, {"decision", decision}};
  e["values"] = values.is_null() ? nlohmann::json::object() : std::move(values);
  events.push_back(std::move(e));
}

ExtractResult extract(const std::vector<scene::Frame>& frames, const scene::InstructionId& instruction,
                      const PerceptionSuite& suite, const AidsConfig& cfg, const CameraIntrinsics& K,
                      const scene::EndEffectorSpec& model) {
  suite.validate();
  cfg.validate();
  if (frames.size() < 2) throw InvalidInputError("extract: at least 2 frames required");
  ExtractResult res;
  const Grounding g = ground_scene(frames[0], instruction, suite, model);
  res.diagnostics.add(0, "grounding", "ok", {{"object_pixels", g.object.count()}, {"ee_pixels", g.ee.count()}});

  res.tracking = track_rollout(frames, g.ee, instruction, suite, cfg);
  for (const auto& e : res.tracking.events)
    res.diagnostics.add(e.frame, "gate", decision_name(e.decision), {{"s", e.s}, {"ds", e.ds}});

  std::optional<RigidTransform> last;
  for (int t = 0; t < static_cast<int>(frames.size()); ++t) {
    const auto& f = frames[static_cast<std::size_t>(t)];
    const PoseEstimate pe = t == 0 ? g.initial : suite.pose->estimate(f, t, res.tracking.masks[static_cast<std::size_t>(t)], model);
    FrameEstimate fe{pe.pose, pe.kappa, false, std::nullopt};
    std::string why;
    if (pe.kappa >= cfg.fallback.kappa_star) {
      fe.accepted = true;
      why = "confident";
    } else if (!last) {
      why = "no_reference";
    } else if (consistency_check(pe.pose, *last, cfg.fallback)) {
      fe.accepted = true;
      why = "consistent";
    } else {
      why = "inconsistent";
    }
    nlohmann::json vals = {{"kappa", pe.kappa}};
    if (last) {
      vals["jump_t"] = (pe.pose.T() - last->T()).norm();
      vals["jump_R"] = geodesic_distance(pe.pose.R(), last->R());
    }
    if (fe.accepted) {
      last = pe.pose;
    } else {
      fe.centroid = recover_translation(f.depth, res.tracking.masks[static_cast<std::size_t>(t)], K);
      vals["centroid_recovered"] = fe.centroid.has_value();
    }
    res.diagnostics.add(t, "pose", fe.accepted ? "accept:" + why : "reject:" + why, vals);
    res.estimates.push_back(fe);
  }
  res.trajectory = fill_rejected(res.estimates);

  std::vector<Vec3> object_points;
  for (int v = 0; v < g.object.height; ++v)
    for (int u = 0; u < g.object.width; ++u) {
      const double d = frames[0].depth[index_of(u, v, g.object.width)];
      if (g.object.at(u, v) && d > 0) object_points.push_back(backproject({double(u), double(v)}, d, K));
    }
  if (object_points.empty()) throw GroundingError("target object has no valid depth in frame 0");
  Vec3 target = Vec3::Zero();
  for (const auto& p : object_points) target += p;
  target /= static_cast<double>(object_points.size());

  const int ref = reference_index(res.trajectory, target);
  const auto candidates = suite.grasp->propose(object_points);
  const std::size_t best = select_grasp(candidates, res.trajectory[static_cast<std::size_t>(ref)].pose,
                                        cfg.grasp.lambda_t, cfg.grasp.lambda_R);
  res.diagnostics.add(ref, "grasp", "selected",
                      {{"candidate", best},
                       {"candidates", candidates.size()},
                       {"score", grasp_score(candidates[best], res.trajectory[static_cast<std::size_t>(ref)].pose,
                                             cfg.grasp.lambda_t, cfg.grasp.lambda_R)}});
  res.actions = synthesize_actions(res.trajectory, candidates[best], ref, cfg.smoothing_window);
  return res;
}

nlohmann::json trajectory_json(const ActionSequence& actions) {
  nlohmann::json w = nlohmann::json::array();
  for (const auto& a : actions) {
    nlohmann::json p = scene::to_json(a.pose);
    w.push_back({{"frame", a.frame},
                 {"R", p["R"]},
                 {"T", p["T"]},
                 {"gripper_open", a.gripper_open},
                 {"provenance", a.provenance},
                 {"kappa", a.kappa}});
  }
  return {{"format", "geoworld.trajectory/1"}, {"waypoints", w}};
}

}  // namespace geoworld::aids
