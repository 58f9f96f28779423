#pragma once

// Deterministic synthetic RGB-D rollouts with full ground truth.
//
// World frame: z up, the desk is the plane z = 0. Objects are flat-shaded
// spheres and boxes; the end effector is a palm box plus two finger boxes
// sharing one object id.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "geoworld/geometry.hpp"
#include "geoworld/rng.hpp"

namespace geoworld::scene {

inline constexpr int kMissId = -1;
inline constexpr int kBackgroundId = 0;

enum class Shape { Sphere, Box };

/// Rigid motion script: constant linear and angular velocity from the frame-0
/// pose, optionally riding with the end effector from `attach_frame` on.
struct Motion {
  Vec3 position = Vec3::Zero();
  Vec3 rotvec = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();          // m / frame
  Vec3 angular_velocity = Vec3::Zero();  // rad / frame, world axes
  int attach_frame = -1;
};

struct Primitive {
  int id = 1;
  Shape shape = Shape::Sphere;
  double radius = 0.05;                      // spheres
  Vec3 half_extents = Vec3::Constant(0.05);  // boxes
  Vec3 color = Vec3::Constant(0.5);
  Motion motion;
};

struct EEKeyframe {
  int frame = 0;
  Vec3 position = Vec3::Zero();
  Vec3 rotvec = Vec3::Zero();
  bool gripper_open = true;
};

/// Two-finger gripper. In its own frame the fingers extend along +z from the palm.
struct EndEffectorSpec {
  bool enabled = true;
  int id = 100;
  Vec3 color{0.95, 0.2, 0.85};
  Vec3 palm_half{0.05, 0.015, 0.02};
  Vec3 finger_half{0.008, 0.015, 0.035};
  double finger_offset_open = 0.042;
  double finger_offset_closed = 0.022;
  double finger_z = 0.055;
  std::vector<EEKeyframe> keyframes;

  /// Largest distance from the EE origin to any point of the assembly.
  double bounding_radius() const;
};

/// Camera eye moves linearly from eye_start to eye_end, always looking at target.
struct CameraScript {
  Vec3 eye_start{0.0, -0.75, 0.6};
  Vec3 eye_end{0.0, -0.75, 0.6};
  Vec3 target{0.0, 0.05, 0.05};
  Vec3 up{0.0, 0.0, 1.0};
};

/// Plane n . X = offset in world coordinates.
struct BackgroundPlane {
  bool enabled = true;
  Vec3 normal{0.0, 0.0, 1.0};
  double offset = 0.0;
  Vec3 color{0.55, 0.5, 0.42};
};

struct InstructionId {
  int task = 0;           // 0 = reach, 1 = pick and lift
  int target_object = 1;  // primitive id

  /// Conditioning-vocabulary index.
  int index(int max_objects) const { return task * max_objects + (target_object - 1); }
};

struct SceneConfig {
  int height = 64;
  int width = 64;
  int frames = 16;
  int patch = 8;
  CameraIntrinsics intrinsics{64.0, 64.0, 31.5, 31.5};
  std::vector<Primitive> primitives;
  CameraScript camera;
  BackgroundPlane background;
  EndEffectorSpec end_effector;
  InstructionId instruction;
  int num_tracks = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

/// One posed, renderable piece of geometry.
struct Part {
  int object_id = 0;
  Shape shape = Shape::Box;
  double radius = 0.0;
  Vec3 half_extents = Vec3::Zero();
  RigidTransform to_world;  // part frame -> world
  Vec3 color = Vec3::Zero();
};

struct SceneState {
  int height = 0;
  int width = 0;
  CameraIntrinsics intrinsics;
  RigidTransform camera;  // world -> camera
  BackgroundPlane background;
  std::vector<Part> parts;
  RigidTransform ee_pose;  // EE -> world
  bool gripper_open = true;
};

struct Frame {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;      // H x W x 3, values in [0, 1]
  std::vector<double> depth;   // H x W z-depth in meters, 0 where invalid
  std::vector<int> object_id;  // H x W; kMissId, kBackgroundId, or a primitive / EE id
  RigidTransform camera;       // world -> camera
  RigidTransform ee_pose;      // EE -> world
  bool gripper_open = true;

  bool valid(int idx) const { return depth[static_cast<std::size_t>(idx)] > 0.0; }
  /// EE pose in this frame's camera coordinates.
  RigidTransform ee_in_camera() const { return compose(camera, ee_pose); }
};

struct TrackSample {
  Pixel pixel;             // projection (NaN when behind the camera)
  bool visible = false;    // in front, inside the image and depth-minimal
  ScenePoint point = ScenePoint::Zero();  // camera-frame position
  Vec3 flow = Vec3::Zero();  // displacement to t+1 beyond camera motion, camera-(t+1) axes
};

struct Track {
  int id = 0;
  int object_id = 0;
  Vec3 local = Vec3::Zero();  // coordinates in the owning object's frame
  std::vector<TrackSample> samples;
};

struct Rollout {
  SceneConfig config;
  std::vector<Frame> frames;
  std::vector<Track> tracks;
  bool ground_truth = true;  // false for generated rollouts (camera / ids unknown)
};

struct Correspondence {
  Pixel pixel;
  bool visible = false;
};

// -- scripts ----------------------------------------------------------------

RigidTransform camera_pose(const SceneConfig& cfg, int t);
RigidTransform ee_pose(const SceneConfig& cfg, int t);
bool gripper_open(const SceneConfig& cfg, int t);
/// Object-to-world pose of primitive `index` at frame t.
RigidTransform object_pose(const SceneConfig& cfg, std::size_t index, int t);
SceneState scene_state(const SceneConfig& cfg, int t);
/// Object-to-world pose by id: identity for the background, the EE pose for the EE id.
RigidTransform object_pose_by_id(const SceneConfig& cfg, int object_id, int t);

// -- rendering --------------------------------------------------------------

struct RayHit {
  int object_id = kMissId;
  double depth = 0.0;  // z-depth
  Vec3 color = Vec3::Zero();
};

/// Nearest hit along the camera ray through continuous pixel (u, v).
RayHit cast_ray(const SceneState& state, const Pixel& p);

Frame render_frame(const SceneState& state);

Rollout generate_rollout(const SceneConfig& cfg);

/// Stored-track oracle for the pixel of `point_id` at t+1.
Correspondence ground_truth_correspondence(const Rollout& rollout, int point_id, int t);

/// Displacement of a world point attached to `object_id` between frames t and t+1,
/// expressed in camera-(t+1) axes (zero for the background).
Vec3 scene_flow(const SceneConfig& cfg, int object_id, const Vec3& world_point, int t);

// -- random scenes ----------------------------------------------------------

struct SceneGenParams {
  int height = 64;
  int width = 64;
  int frames = 16;
  int patch = 8;
  int max_objects = 3;
  int num_tracks = 64;
  double camera_drift = 0.08;        // max eye displacement over the rollout (m)
  double moving_object_prob = 0.3;
};

/// Slot colors: primitive id k always gets palette color k.
Vec3 slot_color(int id);

SceneConfig random_scene(const SceneGenParams& params, std::uint64_t seed);

// -- serialization ----------------------------------------------------------

nlohmann::json to_json(const SceneConfig& cfg);
SceneConfig scene_config_from_json(const nlohmann::json& j);
SceneGenParams scene_gen_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneGenParams& p);
nlohmann::json to_json(const RigidTransform& T);
RigidTransform rigid_from_json(const nlohmann::json& j);

/// Directory layout: manifest.json, rgb.gwt (N x H x W x 3 f32), depth.gwt
/// (N x H x W f32), object_id.gwt (N x H x W i32, ground truth only).
void write_rollout(const std::filesystem::path& dir, const Rollout& rollout);
Rollout read_rollout(const std::filesystem::path& dir);

}  // namespace geoworld::scene
