#include "geoworld/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <string>

#include "geoworld/error.hpp"
#include "geoworld/io.hpp"

namespace geoworld::scene {

namespace {

constexpr double kHitEps = 1e-9;

Mat3 yaw_down(double yaw) {
  // Fingers (EE +z) point along world -z; yaw turns the gripper about world z.
  return rotation_exp(Vec3(0, 0, yaw)) * rotation_exp(Vec3(std::numbers::pi, 0, 0));
}

// Part geometry transformed into camera coordinates once per frame.
struct CameraPart {
  int object_id;
  Shape shape;
  double radius;
  Vec3 half_extents;
  Mat3 R;  // part -> camera
  Vec3 c;
  Vec3 color;
};

struct PreparedScene {
  std::vector<CameraPart> parts;
  bool plane = false;
  Vec3 plane_normal;
  double plane_rhs = 0.0;
  Vec3 plane_color;
  CameraIntrinsics K;
};

PreparedScene prepare(const SceneState& s) {
  PreparedScene p;
  p.K = s.intrinsics;
  for (const auto& part : s.parts) {
    const RigidTransform in_cam = compose(s.camera, part.to_world);
    p.parts.push_back({part.object_id, part.shape, part.radius, part.half_extents, in_cam.R(), in_cam.T(),
                       part.color});
  }
  if (s.background.enabled) {
    p.plane = true;
    p.plane_normal = s.camera.R() * s.background.normal;
    p.plane_rhs = s.background.offset + p.plane_normal.dot(s.camera.T());
    p.plane_color = s.background.color;
  }
  return p;
}

double intersect_sphere(const Vec3& d, const Vec3& c, double r) {
  const double a = d.squaredNorm();
  const double b = d.dot(c);
  const double disc = b * b - a * (c.squaredNorm() - r * r);
  if (disc < 0.0) return -1.0;
  const double sq = std::sqrt(disc);
  const double t1 = (b - sq) / a;
  if (t1 > kHitEps) return t1;
  const double t2 = (b + sq) / a;
  return t2 > kHitEps ? t2 : -1.0;
}

double intersect_box(const Vec3& d, const Mat3& R, const Vec3& c, const Vec3& h) {
  const Vec3 o = -(R.transpose() * c);
  const Vec3 db = R.transpose() * d;
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    if (std::abs(db[i]) < 1e-15) {
      if (std::abs(o[i]) > h[i]) return -1.0;
      continue;
    }
    double t0 = (-h[i] - o[i]) / db[i];
    double t1 = (h[i] - o[i]) / db[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return -1.0;
  }
  if (tmin > kHitEps) return tmin;
  return tmax > kHitEps ? tmax : -1.0;
}

RayHit cast_prepared(const PreparedScene& s, const Pixel& p) {
  const Vec3 d((p.u - s.K.cx) / s.K.fx, (p.v - s.K.cy) / s.K.fy, 1.0);
  RayHit best;
  double best_t = std::numeric_limits<double>::infinity();
  for (const auto& part : s.parts) {
    const double t = part.shape == Shape::Sphere ? intersect_sphere(d, part.c, part.radius)
                                                 : intersect_box(d, part.R, part.c, part.half_extents);
    if (t > 0.0 && t < best_t) {
      best_t = t;
      best = {part.object_id, t, part.color};
    }
  }
  if (s.plane) {
    const double denom = s.plane_normal.dot(d);
    if (std::abs(denom) > 1e-15) {
      const double t = s.plane_rhs / denom;
      if (t > kHitEps && t < best_t) {
        best_t = t;
        best = {kBackgroundId, t, s.plane_color};
      }
    }
  }
  return best;
}

int primitive_index(const SceneConfig& cfg, int object_id) {
  for (std::size_t i = 0; i < cfg.primitives.size(); ++i)
    if (cfg.primitives[i].id == object_id) return static_cast<int>(i);
  return -1;
}

/// Object-to-world pose of any object id (background: identity).
RigidTransform any_object_pose(const SceneConfig& cfg, int object_id, int t) {
  if (object_id == kBackgroundId) return RigidTransform::identity();
  if (cfg.end_effector.enabled && object_id == cfg.end_effector.id) return ee_pose(cfg, t);
  const int idx = primitive_index(cfg, object_id);
  if (idx < 0) throw InvalidInputError("unknown object id " + std::to_string(object_id));
  return object_pose(cfg, static_cast<std::size_t>(idx), t);
}

}  // namespace

RigidTransform object_pose_by_id(const SceneConfig& cfg, int object_id, int t) {
  return any_object_pose(cfg, object_id, t);
}

double EndEffectorSpec::bounding_radius() const {
  const double palm = palm_half.norm();
  const Vec3 finger_far(std::max(finger_offset_open, finger_offset_closed) + finger_half.x(), finger_half.y(),
                        finger_z + finger_half.z());
  return std::max(palm, finger_far.norm());
}

void SceneConfig::validate() const {
  if (frames < 2) throw ConfigError("scene needs at least 2 frames");
  if (patch <= 0 || height <= 0 || width <= 0) throw ConfigError("image size and patch must be positive");
  if (height % patch != 0 || width % patch != 0)
    throw ConfigError("image size must be a multiple of the patch size");
  try {
    intrinsics.validate();
  } catch (const InvalidInputError& e) {
    throw ConfigError(e.what());
  }
  std::set<int> ids;
  for (const auto& p : primitives) {
    if (p.id < 1) throw ConfigError("primitive ids must be >= 1");
    if (!ids.insert(p.id).second) throw ConfigError("duplicate primitive id " + std::to_string(p.id));
    if (end_effector.enabled && p.id == end_effector.id) throw ConfigError("primitive id clashes with the EE id");
    if (p.shape == Shape::Sphere && !(p.radius > 0)) throw ConfigError("sphere radius must be positive");
    if (p.shape == Shape::Box && !(p.half_extents.minCoeff() > 0)) throw ConfigError("box extents must be positive");
    if (p.motion.attach_frame >= 0 && !end_effector.enabled)
      throw ConfigError("attached primitive requires an end effector");
  }
  if (!primitives.empty() && !ids.contains(instruction.target_object))
    throw ConfigError("instruction target object " + std::to_string(instruction.target_object) +
                      " is not in the scene");
  if (end_effector.enabled) {
    if (end_effector.keyframes.empty()) throw ConfigError("end effector needs at least one keyframe");
    for (std::size_t i = 1; i < end_effector.keyframes.size(); ++i)
      if (end_effector.keyframes[i].frame <= end_effector.keyframes[i - 1].frame)
        throw ConfigError("end-effector keyframes must be strictly increasing");
  }
  if (num_tracks < 0) throw ConfigError("num_tracks must be non-negative");
  for (int t = 0; t < frames; ++t) (void)camera_pose(*this, t);
}

RigidTransform camera_pose(const SceneConfig& cfg, int t) {
  const double a = cfg.frames > 1 ? static_cast<double>(t) / (cfg.frames - 1) : 0.0;
  const Vec3 eye = (1.0 - a) * cfg.camera.eye_start + a * cfg.camera.eye_end;
  auto pose = look_at(eye, cfg.camera.target, cfg.camera.up);
  if (!pose) throw ConfigError("degenerate camera script at frame " + std::to_string(t));
  return *pose;
}

RigidTransform ee_pose(const SceneConfig& cfg, int t) {
  const auto& kf = cfg.end_effector.keyframes;
  if (kf.empty()) return RigidTransform::identity();
  if (t <= kf.front().frame) return RigidTransform::from_rotvec(kf.front().rotvec, kf.front().position);
  if (t >= kf.back().frame) return RigidTransform::from_rotvec(kf.back().rotvec, kf.back().position);
  std::size_t i = 0;
  while (kf[i + 1].frame < t) ++i;
  const auto& a = kf[i];
  const auto& b = kf[i + 1];
  const double u = static_cast<double>(t - a.frame) / (b.frame - a.frame);
  const Mat3 R = slerp(rotation_exp(a.rotvec), rotation_exp(b.rotvec), u);
  return {R, (1.0 - u) * a.position + u * b.position, 1e-8};
}

bool gripper_open(const SceneConfig& cfg, int t) {
  bool open = true;
  for (const auto& k : cfg.end_effector.keyframes)
    if (k.frame <= t) open = k.gripper_open;
  if (!cfg.end_effector.keyframes.empty() && t < cfg.end_effector.keyframes.front().frame)
    open = cfg.end_effector.keyframes.front().gripper_open;
  return open;
}

RigidTransform object_pose(const SceneConfig& cfg, std::size_t index, int t) {
  const Motion& m = cfg.primitives.at(index).motion;
  auto free_pose = [&](int f) {
    const Mat3 R = rotation_exp(m.angular_velocity * f) * rotation_exp(m.rotvec);
    return RigidTransform(R, m.position + m.velocity * f, 1e-8);
  };
  if (m.attach_frame < 0 || t < m.attach_frame) return free_pose(t);
  const RigidTransform rel = compose(invert(ee_pose(cfg, m.attach_frame)), free_pose(m.attach_frame));
  return compose(ee_pose(cfg, t), rel);
}

SceneState scene_state(const SceneConfig& cfg, int t) {
  SceneState s;
  s.height = cfg.height;
  s.width = cfg.width;
  s.intrinsics = cfg.intrinsics;
  s.camera = camera_pose(cfg, t);
  s.background = cfg.background;
  for (std::size_t i = 0; i < cfg.primitives.size(); ++i) {
    const auto& p = cfg.primitives[i];
    s.parts.push_back({p.id, p.shape, p.radius, p.half_extents, object_pose(cfg, i, t), p.color});
  }
  s.ee_pose = ee_pose(cfg, t);
  s.gripper_open = gripper_open(cfg, t);
  const auto& ee = cfg.end_effector;
  if (ee.enabled) {
    s.parts.push_back({ee.id, Shape::Box, 0.0, ee.palm_half, s.ee_pose, ee.color});
    const double off = s.gripper_open ? ee.finger_offset_open : ee.finger_offset_closed;
    for (double sign : {-1.0, 1.0}) {
      const RigidTransform local = RigidTransform::translation(Vec3(sign * off, 0.0, ee.finger_z));
      s.parts.push_back({ee.id, Shape::Box, 0.0, ee.finger_half, compose(s.ee_pose, local), ee.color});
    }
  }
  return s;
}

RayHit cast_ray(const SceneState& state, const Pixel& p) { return cast_prepared(prepare(state), p); }

Frame render_frame(const SceneState& state) {
  const PreparedScene prepared = prepare(state);
  Frame f;
  f.height = state.height;
  f.width = state.width;
  const std::size_t n = static_cast<std::size_t>(state.height) * state.width;
  f.rgb.assign(3 * n, 0.0f);
  f.depth.assign(n, 0.0);
  f.object_id.assign(n, kMissId);
  for (int v = 0; v < state.height; ++v) {
    for (int u = 0; u < state.width; ++u) {
      const std::size_t i = static_cast<std::size_t>(v) * state.width + u;
      const RayHit hit = cast_prepared(prepared, {static_cast<double>(u), static_cast<double>(v)});
      if (hit.object_id == kMissId) continue;
      f.depth[i] = hit.depth;
      f.object_id[i] = hit.object_id;
      for (int c = 0; c < 3; ++c) f.rgb[3 * i + c] = static_cast<float>(hit.color[c]);
    }
  }
  f.camera = state.camera;
  f.ee_pose = state.ee_pose;
  f.gripper_open = state.gripper_open;
  return f;
}

Vec3 scene_flow(const SceneConfig& cfg, int object_id, const Vec3& world_point, int t) {
  if (object_id == kBackgroundId) return Vec3::Zero();
  const RigidTransform a = any_object_pose(cfg, object_id, t);
  const RigidTransform b = any_object_pose(cfg, object_id, t + 1);
  const Vec3 local = invert(a).apply(world_point);
  return camera_pose(cfg, t + 1).R() * (b.apply(local) - world_point);
}

Rollout generate_rollout(const SceneConfig& cfg) {
  cfg.validate();
  Rollout r;
  r.config = cfg;
  std::vector<SceneState> states;
  for (int t = 0; t < cfg.frames; ++t) {
    states.push_back(scene_state(cfg, t));
    r.frames.push_back(render_frame(states.back()));
  }

  // Seed tracks on frame-0 surface points.
  const Frame& f0 = r.frames.front();
  std::vector<int> candidates;
  for (int i = 0; i < f0.height * f0.width; ++i)
    if (f0.object_id[static_cast<std::size_t>(i)] != kMissId) candidates.push_back(i);
  Rng rng(cfg.seed ^ 0x5eedf00dULL);
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(cfg.num_tracks), candidates.size());
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t j = k + static_cast<std::size_t>(rng.below(candidates.size() - k));
    std::swap(candidates[k], candidates[j]);
  }

  for (std::size_t k = 0; k < count; ++k) {
    const int idx = candidates[k];
    const Pixel p{static_cast<double>(idx % f0.width), static_cast<double>(idx / f0.width)};
    Track tr;
    tr.id = static_cast<int>(k);
    tr.object_id = f0.object_id[static_cast<std::size_t>(idx)];
    const Vec3 world = invert(f0.camera).apply(backproject(p, f0.depth[static_cast<std::size_t>(idx)], cfg.intrinsics));
    tr.local = invert(any_object_pose(cfg, tr.object_id, 0)).apply(world);

    std::vector<Vec3> world_at(static_cast<std::size_t>(cfg.frames));
    for (int t = 0; t < cfg.frames; ++t) world_at[static_cast<std::size_t>(t)] = any_object_pose(cfg, tr.object_id, t).apply(tr.local);

    for (int t = 0; t < cfg.frames; ++t) {
      const Frame& f = r.frames[static_cast<std::size_t>(t)];
      TrackSample s;
      s.point = f.camera.apply(world_at[static_cast<std::size_t>(t)]);
      if (auto px = project(s.point, cfg.intrinsics)) {
        s.pixel = *px;
        const bool inside = px->u >= -0.5 && px->u < f.width - 0.5 && px->v >= -0.5 && px->v < f.height - 0.5;
        if (inside) {
          const RayHit hit = cast_ray(states[static_cast<std::size_t>(t)], *px);
          s.visible = hit.object_id == tr.object_id &&
                      std::abs(hit.depth - s.point.z()) <= 1e-6 * std::max(1.0, s.point.z());
        }
      } else {
        s.pixel = {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
      }
      if (t + 1 < cfg.frames)
        s.flow = r.frames[static_cast<std::size_t>(t) + 1].camera.R() *
                 (world_at[static_cast<std::size_t>(t) + 1] - world_at[static_cast<std::size_t>(t)]);
      tr.samples.push_back(s);
    }
    r.tracks.push_back(std::move(tr));
  }
  return r;
}

Correspondence ground_truth_correspondence(const Rollout& rollout, int point_id, int t) {
  if (point_id < 0 || static_cast<std::size_t>(point_id) >= rollout.tracks.size())
    throw InvalidInputError("unknown track id " + std::to_string(point_id));
  if (t < 0 || t + 1 >= static_cast<int>(rollout.frames.size()))
    throw InvalidInputError("frame index out of range for a correspondence");
  const Track& tr = rollout.tracks[static_cast<std::size_t>(point_id)];
  const TrackSample& now = tr.samples[static_cast<std::size_t>(t)];
  const TrackSample& next = tr.samples[static_cast<std::size_t>(t) + 1];
  if (!now.visible) return {next.pixel, false};
  return {next.pixel, next.visible};
}

// -- random scenes ----------------------------------------------------------

Vec3 slot_color(int id) {
  static const Vec3 palette[] = {{0.9, 0.15, 0.15}, {0.15, 0.8, 0.25}, {0.15, 0.3, 0.95},
                                 {0.95, 0.85, 0.1}, {0.1, 0.85, 0.9}};
  return palette[static_cast<std::size_t>(id - 1) % 5];
}

SceneConfig random_scene(const SceneGenParams& gp, std::uint64_t seed) {
  Rng rng(seed);
  SceneConfig cfg;
  cfg.height = gp.height;
  cfg.width = gp.width;
  cfg.frames = gp.frames;
  cfg.patch = gp.patch;
  cfg.num_tracks = gp.num_tracks;
  cfg.seed = seed;
  const double f = 1.0 * gp.width;
  cfg.intrinsics = {f, f, 0.5 * (gp.width - 1), 0.5 * (gp.height - 1)};

  const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double drift = rng.uniform(0.0, gp.camera_drift);
  cfg.camera.eye_start = Vec3(rng.uniform(-0.05, 0.05), -0.75, 0.6);
  cfg.camera.eye_end = cfg.camera.eye_start + drift * Vec3(std::cos(ang), 0.0, std::sin(ang));

  const int n_obj = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(gp.max_objects)));
  std::vector<Vec3> centers;
  for (int k = 1; k <= n_obj; ++k) {
    Primitive p;
    p.id = k;
    p.color = slot_color(k);
    p.shape = rng.uniform() < 0.5 ? Shape::Sphere : Shape::Box;
    double height_half;
    if (p.shape == Shape::Sphere) {
      p.radius = rng.uniform(0.04, 0.065);
      height_half = p.radius;
    } else {
      p.half_extents = Vec3(rng.uniform(0.03, 0.055), rng.uniform(0.03, 0.055), rng.uniform(0.03, 0.06));
      height_half = p.half_extents.z();
      p.motion.rotvec = Vec3(0, 0, rng.uniform(-0.6, 0.6));
    }
    Vec3 c;
    for (int attempt = 0; attempt < 50; ++attempt) {
      c = Vec3(rng.uniform(-0.25, 0.25), rng.uniform(-0.12, 0.2), height_half);
      bool clear = true;
      for (const auto& o : centers)
        if ((o.head<2>() - c.head<2>()).norm() < 0.15) clear = false;
      if (clear) break;
    }
    centers.push_back(c);
    p.motion.position = c;
    cfg.primitives.push_back(p);
  }

  cfg.instruction.task = static_cast<int>(rng.below(2));
  cfg.instruction.target_object = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_obj)));
  auto& target = cfg.primitives[static_cast<std::size_t>(cfg.instruction.target_object - 1)];

  for (auto& p : cfg.primitives) {
    if (p.id != target.id && rng.uniform() < gp.moving_object_prob) {
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      p.motion.velocity = rng.uniform(0.002, 0.006) * Vec3(std::cos(a), std::sin(a), 0.0) * (16.0 / gp.frames);
    }
  }

  auto& ee = cfg.end_effector;
  const int last = gp.frames - 1;
  const int grasp = last / 2 + 1;
  const double yaw0 = rng.uniform(-0.8, 0.8);
  const double yaw1 = rng.uniform(-0.8, 0.8);
  const Vec3 start(rng.uniform(-0.2, 0.2), rng.uniform(-0.1, 0.1), rng.uniform(0.3, 0.38));
  const Vec3 tc = target.motion.position;
  const Vec3 at_grasp(tc.x(), tc.y(), tc.z() + ee.finger_z + 0.005);
  ee.keyframes.push_back({0, start, rotation_log(yaw_down(yaw0)), true});
  ee.keyframes.push_back({grasp, at_grasp, rotation_log(yaw_down(yaw1)), true});
  if (grasp + 1 <= last) {
    ee.keyframes.push_back({grasp + 1, at_grasp, rotation_log(yaw_down(yaw1)), false});
    if (cfg.instruction.task == 1) {
      target.motion.attach_frame = grasp + 1;
      if (grasp + 1 < last)
        ee.keyframes.push_back({last, at_grasp + Vec3(0, 0, 0.18), rotation_log(yaw_down(yaw1)), false});
    }
  }
  cfg.validate();
  return cfg;
}

// -- serialization ----------------------------------------------------------

namespace {

nlohmann::json vec(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void maybe_vec(const nlohmann::json& j, const char* key, Vec3& out) {
  if (j.contains(key)) out = vec_from(j.at(key));
}

double json_num(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

nlohmann::json num_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json to_json(const RigidTransform& T) {
  nlohmann::json R = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) R.push_back(T.R()(r, c));
  return {{"R", R}, {"T", vec(T.T())}};
}

RigidTransform rigid_from_json(const nlohmann::json& j) {
  Mat3 R;
  const auto& a = j.at("R");
  if (a.size() != 9) throw FormatError("rotation needs 9 entries");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) R(r, c) = a[static_cast<std::size_t>(3 * r + c)].get<double>();
  return {R, vec_from(j.at("T")), 1e-6};
}

nlohmann::json to_json(const SceneConfig& cfg) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : cfg.primitives) {
    prims.push_back({{"id", p.id},
                     {"shape", p.shape == Shape::Sphere ? "sphere" : "box"},
                     {"radius", p.radius},
                     {"half_extents", vec(p.half_extents)},
                     {"color", vec(p.color)},
                     {"motion",
                      {{"position", vec(p.motion.position)},
                       {"rotvec", vec(p.motion.rotvec)},
                       {"velocity", vec(p.motion.velocity)},
                       {"angular_velocity", vec(p.motion.angular_velocity)},
                       {"attach_frame", p.motion.attach_frame}}}});
  }
  nlohmann::json kfs = nlohmann::json::array();
  for (const auto& k : cfg.end_effector.keyframes)
    kfs.push_back({{"frame", k.frame}, {"position", vec(k.position)}, {"rotvec", vec(k.rotvec)},
                   {"gripper_open", k.gripper_open}});
  const auto& ee = cfg.end_effector;
  return {
      {"height", cfg.height},
      {"width", cfg.width},
      {"frames", cfg.frames},
      {"patch", cfg.patch},
      {"intrinsics", {{"fx", cfg.intrinsics.fx}, {"fy", cfg.intrinsics.fy}, {"cx", cfg.intrinsics.cx}, {"cy", cfg.intrinsics.cy}}},
      {"primitives", prims},
      {"camera",
       {{"eye_start", vec(cfg.camera.eye_start)},
        {"eye_end", vec(cfg.camera.eye_end)},
        {"target", vec(cfg.camera.target)},
        {"up", vec(cfg.camera.up)}}},
      {"background",
       {{"enabled", cfg.background.enabled},
        {"normal", vec(cfg.background.normal)},
        {"offset", cfg.background.offset},
        {"color", vec(cfg.background.color)}}},
      {"end_effector",
       {{"enabled", ee.enabled},
        {"id", ee.id},
        {"color", vec(ee.color)},
        {"palm_half", vec(ee.palm_half)},
        {"finger_half", vec(ee.finger_half)},
        {"finger_offset_open", ee.finger_offset_open},
        {"finger_offset_closed", ee.finger_offset_closed},
        {"finger_z", ee.finger_z},
        {"keyframes", kfs}}},
      {"instruction", {{"task", cfg.instruction.task}, {"target_object", cfg.instruction.target_object}}},
      {"num_tracks", cfg.num_tracks},
      {"seed", cfg.seed},
  };
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
  try {
    SceneConfig cfg;
    maybe(j, "height", cfg.height);
    maybe(j, "width", cfg.width);
    maybe(j, "frames", cfg.frames);
    maybe(j, "patch", cfg.patch);
    if (j.contains("intrinsics")) {
      const auto& k = j.at("intrinsics");
      cfg.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                        k.at("cy").get<double>()};
    } else {
      cfg.intrinsics = {1.0 * cfg.width, 1.0 * cfg.width, 0.5 * (cfg.width - 1), 0.5 * (cfg.height - 1)};
    }
    if (j.contains("primitives")) {
      for (const auto& pj : j.at("primitives")) {
        Primitive p;
        maybe(pj, "id", p.id);
        const std::string shape = pj.value("shape", "sphere");
        if (shape == "sphere") p.shape = Shape::Sphere;
        else if (shape == "box") p.shape = Shape::Box;
        else throw ConfigError("unknown primitive shape '" + shape + "'");
        maybe(pj, "radius", p.radius);
        maybe_vec(pj, "half_extents", p.half_extents);
        maybe_vec(pj, "color", p.color);
        if (pj.contains("motion")) {
          const auto& m = pj.at("motion");
          maybe_vec(m, "position", p.motion.position);
          maybe_vec(m, "rotvec", p.motion.rotvec);
          maybe_vec(m, "velocity", p.motion.velocity);
          maybe_vec(m, "angular_velocity", p.motion.angular_velocity);
          maybe(m, "attach_frame", p.motion.attach_frame);
        }
        cfg.primitives.push_back(p);
      }
    }
    if (j.contains("camera")) {
      const auto& c = j.at("camera");
      maybe_vec(c, "eye_start", cfg.camera.eye_start);
      maybe_vec(c, "eye_end", cfg.camera.eye_end);
      maybe_vec(c, "target", cfg.camera.target);
      maybe_vec(c, "up", cfg.camera.up);
    }
    if (j.contains("background")) {
      const auto& b = j.at("background");
      maybe(b, "enabled", cfg.background.enabled);
      maybe_vec(b, "normal", cfg.background.normal);
      maybe(b, "offset", cfg.background.offset);
      maybe_vec(b, "color", cfg.background.color);
    }
    if (j.contains("end_effector")) {
      const auto& e = j.at("end_effector");
      auto& ee = cfg.end_effector;
      maybe(e, "enabled", ee.enabled);
      maybe(e, "id", ee.id);
      maybe_vec(e, "color", ee.color);
      maybe_vec(e, "palm_half", ee.palm_half);
      maybe_vec(e, "finger_half", ee.finger_half);
      maybe(e, "finger_offset_open", ee.finger_offset_open);
      maybe(e, "finger_offset_closed", ee.finger_offset_closed);
      maybe(e, "finger_z", ee.finger_z);
      if (e.contains("keyframes"))
        for (const auto& k : e.at("keyframes")) {
          EEKeyframe kf;
          maybe(k, "frame", kf.frame);
          maybe_vec(k, "position", kf.position);
          maybe_vec(k, "rotvec", kf.rotvec);
          maybe(k, "gripper_open", kf.gripper_open);
          ee.keyframes.push_back(kf);
        }
    }
    if (j.contains("instruction")) {
      maybe(j.at("instruction"), "task", cfg.instruction.task);
      maybe(j.at("instruction"), "target_object", cfg.instruction.target_object);
    }
    maybe(j, "num_tracks", cfg.num_tracks);
    maybe(j, "seed", cfg.seed);
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene config: ") + e.what());
  }
}

SceneGenParams scene_gen_from_json(const nlohmann::json& j) {
  SceneGenParams p;
  try {
    maybe(j, "height", p.height);
    maybe(j, "width", p.width);
    maybe(j, "frames", p.frames);
    maybe(j, "patch", p.patch);
    maybe(j, "max_objects", p.max_objects);
    maybe(j, "num_tracks", p.num_tracks);
    maybe(j, "camera_drift", p.camera_drift);
    maybe(j, "moving_object_prob", p.moving_object_prob);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene block: ") + e.what());
  }
  if (p.max_objects < 1 || p.max_objects > 5) throw ConfigError("max_objects must be in [1, 5]");
  return p;
}

nlohmann::json to_json(const SceneGenParams& p) {
  return {{"height", p.height},         {"width", p.width},
          {"frames", p.frames},         {"patch", p.patch},
          {"max_objects", p.max_objects}, {"num_tracks", p.num_tracks},
          {"camera_drift", p.camera_drift}, {"moving_object_prob", p.moving_object_prob}};
}

void write_rollout(const std::filesystem::path& dir, const Rollout& r) {
  std::filesystem::create_directories(dir);
  const auto N = static_cast<std::uint64_t>(r.frames.size());
  const auto H = static_cast<std::uint64_t>(r.config.height);
  const auto W = static_cast<std::uint64_t>(r.config.width);

  std::vector<double> rgb, depth, ids;
  rgb.reserve(N * H * W * 3);
  depth.reserve(N * H * W);
  for (const auto& f : r.frames) {
    rgb.insert(rgb.end(), f.rgb.begin(), f.rgb.end());
    depth.insert(depth.end(), f.depth.begin(), f.depth.end());
    if (r.ground_truth) ids.insert(ids.end(), f.object_id.begin(), f.object_id.end());
  }
  io::write_tensor(dir / "rgb.gwt", io::DType::F32, {N, H, W, 3}, rgb);
  io::write_tensor(dir / "depth.gwt", io::DType::F32, {N, H, W}, depth);
  if (r.ground_truth) io::write_tensor(dir / "object_id.gwt", io::DType::I32, {N, H, W}, ids);

  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : r.frames)
    frames.push_back({{"camera", to_json(f.camera)}, {"ee_pose", to_json(f.ee_pose)}, {"gripper_open", f.gripper_open}});
  nlohmann::json tracks = nlohmann::json::array();
  for (const auto& tr : r.tracks) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : tr.samples)
      samples.push_back({{"u", num_or_null(s.pixel.u)},
                         {"v", num_or_null(s.pixel.v)},
                         {"visible", s.visible},
                         {"X", vec(s.point)},
                         {"flow", vec(s.flow)}});
    tracks.push_back({{"id", tr.id}, {"object", tr.object_id}, {"local", vec(tr.local)}, {"samples", samples}});
  }
  nlohmann::json manifest = {
      {"format", "geoworld.rollout/1"},
      {"ground_truth", r.ground_truth},
      {"config", to_json(r.config)},
      {"intrinsics",
       {{"fx", r.config.intrinsics.fx}, {"fy", r.config.intrinsics.fy}, {"cx", r.config.intrinsics.cx}, {"cy", r.config.intrinsics.cy}}},
      {"tensors",
       {{"rgb", {{"file", "rgb.gwt"}, {"dtype", "f32"}, {"shape", {N, H, W, 3}}}},
        {"depth", {{"file", "depth.gwt"}, {"dtype", "f32"}, {"shape", {N, H, W}}}}}},
      {"frames", frames},
      {"tracks", tracks},
  };
  if (r.ground_truth)
    manifest["tensors"]["object_id"] = {{"file", "object_id.gwt"}, {"dtype", "i32"}, {"shape", {N, H, W}}};
  io::write_json(dir / "manifest.json", manifest);
}

Rollout read_rollout(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw MissingInputError("no rollout manifest in " + dir.string());
  const nlohmann::json m = io::read_json(dir / "manifest.json");
  try {
    if (m.value("format", "") != "geoworld.rollout/1") throw FormatError(dir.string() + ": unknown rollout format");
    Rollout r;
    r.ground_truth = m.at("ground_truth").get<bool>();
    r.config = scene_config_from_json(m.at("config"));
    const io::Tensor rgb = io::read_tensor(dir / "rgb.gwt");
    const io::Tensor depth = io::read_tensor(dir / "depth.gwt");
    const auto N = static_cast<std::uint64_t>(m.at("frames").size());
    const auto H = static_cast<std::uint64_t>(r.config.height);
    const auto W = static_cast<std::uint64_t>(r.config.width);
    if (rgb.shape != std::vector<std::uint64_t>{N, H, W, 3} || depth.shape != std::vector<std::uint64_t>{N, H, W})
      throw FormatError(dir.string() + ": tensor shapes disagree with the manifest");
    io::Tensor ids;
    if (r.ground_truth) {
      ids = io::read_tensor(dir / "object_id.gwt");
      if (ids.shape != depth.shape) throw FormatError(dir.string() + ": object_id shape mismatch");
    }
    const std::size_t plane = H * W;
    for (std::uint64_t t = 0; t < N; ++t) {
      Frame f;
      f.height = static_cast<int>(H);
      f.width = static_cast<int>(W);
      f.rgb.resize(3 * plane);
      for (std::size_t i = 0; i < 3 * plane; ++i) f.rgb[i] = static_cast<float>(rgb.values[t * 3 * plane + i]);
      f.depth.assign(depth.values.begin() + static_cast<std::ptrdiff_t>(t * plane),
                     depth.values.begin() + static_cast<std::ptrdiff_t>((t + 1) * plane));
      if (r.ground_truth) {
        f.object_id.resize(plane);
        for (std::size_t i = 0; i < plane; ++i) f.object_id[i] = static_cast<int>(ids.values[t * plane + i]);
      }
      const auto& fj = m.at("frames")[t];
      f.camera = rigid_from_json(fj.at("camera"));
      f.ee_pose = rigid_from_json(fj.at("ee_pose"));
      f.gripper_open = fj.at("gripper_open").get<bool>();
      r.frames.push_back(std::move(f));
    }
    for (const auto& tj : m.at("tracks")) {
      Track tr;
      tr.id = tj.at("id").get<int>();
      tr.object_id = tj.at("object").get<int>();
      tr.local = vec_from(tj.at("local"));
      for (const auto& sj : tj.at("samples")) {
        TrackSample s;
        s.pixel = {json_num(sj.at("u")), json_num(sj.at("v"))};
        s.visible = sj.at("visible").get<bool>();
        s.point = vec_from(sj.at("X"));
        s.flow = vec_from(sj.at("flow"));
        tr.samples.push_back(s);
      }
      if (tr.samples.size() != N) throw FormatError(dir.string() + ": track length differs from frame count");
      r.tracks.push_back(std::move(tr));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + ": malformed manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
}

}  // namespace geoworld::scene
