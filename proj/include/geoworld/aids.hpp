#pragma once

// Adaptive inverse dynamics: generated RGB-D frames plus an instruction to
// end-effector waypoints.
//
// Poses are EE -> camera transforms in each frame's camera coordinates; with a
// static camera these form one consistent trajectory.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geoworld/geometry.hpp"
#include "geoworld/scene.hpp"

namespace geoworld::aids {

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> on;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), on(static_cast<std::size_t>(h) * w, 0) {}
  int count() const;
  bool empty() const { return count() == 0; }
  bool at(int u, int v) const;
  bool operator==(const Mask& o) const = default;
};

// -- perception backends -------------------------------------------------------

struct GroundingResult {
  Mask object;
  Mask ee;
};

class Grounder {
 public:
  virtual ~Grounder() = default;
  /// Object and EE masks; either may come back empty.
  virtual GroundingResult ground(const scene::Frame& frame, int t, const scene::InstructionId& instruction) const = 0;
  /// EE mask at t given the mask at t-1 and the reliable keypoints at t.
  /// Default: shift by the median keypoint displacement.
  virtual Mask propagate(const scene::Frame& prev, const scene::Frame& next, int t, const Mask& prev_mask,
                         const std::vector<Pixel>& prev_points, const std::vector<Pixel>& next_points) const;
  virtual nlohmann::json knobs() const { return nlohmann::json::object(); }
};

struct TrackStep {
  std::vector<Pixel> pixels;
  std::vector<bool> reliable;
};

class TrackSession {
 public:
  virtual ~TrackSession() = default;
  /// Moves every seed to frame t (called with t = t0 + 1, t0 + 2, ...).
  virtual TrackStep advance(int t) = 0;
};

class Tracker {
 public:
  virtual ~Tracker() = default;
  virtual std::unique_ptr<TrackSession> start(const std::vector<scene::Frame>& frames, int t0,
                                              const std::vector<Pixel>& seeds) const = 0;
  virtual nlohmann::json knobs() const { return nlohmann::json::object(); }
};

struct PoseEstimate {
  RigidTransform pose;  // EE -> camera
  double kappa = 0.0;   // confidence in [0, 1]
};

class PoseEstimator {
 public:
  virtual ~PoseEstimator() = default;
  virtual PoseEstimate estimate(const scene::Frame& frame, int t, const Mask& ee_mask,
                                const scene::EndEffectorSpec& model) const = 0;
  virtual nlohmann::json knobs() const { return nlohmann::json::object(); }
};

class GraspProposer {
 public:
  virtual ~GraspProposer() = default;
  virtual std::vector<RigidTransform> propose(const std::vector<Vec3>& object_points) const = 0;
  virtual nlohmann::json knobs() const { return nlohmann::json::object(); }
};

struct PerceptionSuite {
  std::shared_ptr<const Grounder> grounder;
  std::shared_ptr<const Tracker> tracker;
  std::shared_ptr<const PoseEstimator> pose;
  std::shared_ptr<const GraspProposer> grasp;
  void validate() const;
};

// Ground-truth backends (need a ground-truth rollout).

class OracleGrounder : public Grounder {
 public:
  explicit OracleGrounder(int ee_id = 100) : ee_id_(ee_id) {}
  GroundingResult ground(const scene::Frame& frame, int t, const scene::InstructionId& instruction) const override;
  /// Reads the true EE mask at t.
  Mask propagate(const scene::Frame& prev, const scene::Frame& next, int t, const Mask& prev_mask,
                 const std::vector<Pixel>& prev_points, const std::vector<Pixel>& next_points) const override;

 private:
  int ee_id_;
};

struct OracleTrackerKnobs {
  double drop_rate = 0.0;    // per point and frame, permanent
  double drift_px = 0.0;     // added to u per frame since the anchor frame
  std::uint64_t seed = 0;
};

class OracleTracker : public Tracker {
 public:
  OracleTracker(const scene::Rollout& rollout, OracleTrackerKnobs knobs = {});
  std::unique_ptr<TrackSession> start(const std::vector<scene::Frame>& frames, int t0,
                                      const std::vector<Pixel>& seeds) const override;
  nlohmann::json knobs() const override;

 private:
  const scene::Rollout* rollout_;
  OracleTrackerKnobs knobs_;
};

struct OraclePoseKnobs {
  double translation_noise = 0.0;  // m, per axis
  double rotation_noise = 0.0;     // rad, per axis
  /// Frames whose estimate is replaced by an outlier.
  std::vector<int> outlier_frames;
  double outlier_rate = 0.0;       // extra outliers drawn per frame
  double outlier_translation = 0.3;
  double outlier_rotation = 1.0;
  double kappa_inlier = 0.95;
  double kappa_outlier = 0.2;
  std::uint64_t seed = 0;
};

class OraclePoseEstimator : public PoseEstimator {
 public:
  OraclePoseEstimator(const scene::Rollout& rollout, OraclePoseKnobs knobs = {});
  PoseEstimate estimate(const scene::Frame& frame, int t, const Mask& ee_mask,
                        const scene::EndEffectorSpec& model) const override;
  nlohmann::json knobs() const override;
  bool is_outlier(int t) const;

 private:
  const scene::Rollout* rollout_;
  OraclePoseKnobs knobs_;
};

// Backends that work on plain RGB-D frames.

/// Assigns each pixel to the nearest palette color (background, object slots,
/// end effector) within `max_distance`.
class ColorGrounder : public Grounder {
 public:
  ColorGrounder(int max_objects, scene::EndEffectorSpec ee = {}, Vec3 background = scene::BackgroundPlane{}.color,
                double max_distance = 0.35);
  GroundingResult ground(const scene::Frame& frame, int t, const scene::InstructionId& instruction) const override;
  Mask propagate(const scene::Frame& prev, const scene::Frame& next, int t, const Mask& prev_mask,
                 const std::vector<Pixel>& prev_points, const std::vector<Pixel>& next_points) const override;
  nlohmann::json knobs() const override;
  /// Palette label per pixel: 0 background, k object k, ee_id for the EE, -1 unassigned.
  std::vector<int> labels(const scene::Frame& frame) const;

 private:
  int max_objects_;
  scene::EndEffectorSpec ee_;
  Vec3 background_;
  double max_distance_;
};

/// Scripted reliability: drops[t] keypoints of the active session become
/// unreliable at frame t. Pixels stay at their seeds.
class ScriptedTracker : public Tracker {
 public:
  explicit ScriptedTracker(std::vector<int> drops) : drops_(std::move(drops)) {}
  std::unique_ptr<TrackSession> start(const std::vector<scene::Frame>& frames, int t0,
                                      const std::vector<Pixel>& seeds) const override;
  nlohmann::json knobs() const override;

 private:
  std::vector<int> drops_;
};

struct BlockMatchKnobs {
  int radius = 2;         // template half-size
  int search = 4;         // search half-window
  double depth_weight = 1.0;
  double max_cost = 0.02; // mean squared RGB-D difference marking a point unreliable
};

/// Integer-pixel template matching on RGB plus weighted depth; the template
/// is refreshed every frame. The seeds' sub-pixel offsets are carried along.
class BlockMatchTracker : public Tracker {
 public:
  explicit BlockMatchTracker(BlockMatchKnobs knobs = {}) : knobs_(knobs) {}
  std::unique_ptr<TrackSession> start(const std::vector<scene::Frame>& frames, int t0,
                                      const std::vector<Pixel>& seeds) const override;
  nlohmann::json knobs() const override;

 private:
  BlockMatchKnobs knobs_;
};

/// Translation from the masked depth centroid, orientation from the principal
/// axes of the masked points. kappa is the masked point count over
/// `coverage` times the projected bounding disk of the EE, capped at 1.
class PointCloudPoseEstimator : public PoseEstimator {
 public:
  explicit PointCloudPoseEstimator(CameraIntrinsics K, double coverage = 0.15) : K_(K), coverage_(coverage) {}
  PoseEstimate estimate(const scene::Frame& frame, int t, const Mask& ee_mask,
                        const scene::EndEffectorSpec& model) const override;
  nlohmann::json knobs() const override { return {{"coverage", coverage_}}; }

 private:
  CameraIntrinsics K_;
  double coverage_;
};

/// Grasps at the object centroid, approach along the camera's optical axis,
/// rotated about it in M even steps.
class AnalyticGraspProposer : public GraspProposer {
 public:
  explicit AnalyticGraspProposer(int candidates = 8) : m_(candidates) {}
  std::vector<RigidTransform> propose(const std::vector<Vec3>& object_points) const override;
  nlohmann::json knobs() const override;

 private:
  int m_;
};

// -- configuration -------------------------------------------------------------

struct GateConfig {
  double tau = 0.5;
  double delta = 0.4;
  void validate() const;
};

struct FallbackConfig {
  double kappa_star = 0.6;
  double eps_t = 0.05;                  // m
  double eps_R = 15.0 * 3.14159265358979323846 / 180.0;  // rad
  void validate() const;
};

struct GraspConfig {
  double lambda_t = 1.0;
  double lambda_R = 0.3;  // m / rad
  void validate() const;
};

struct AidsConfig {
  GateConfig gate;
  FallbackConfig fallback;
  GraspConfig grasp;
  int smoothing_window = 3;
  int anchor_count = 64;
  int max_objects = 3;
  std::uint64_t seed = 0;
  void validate() const;
};

nlohmann::json to_json(const AidsConfig& c);
AidsConfig aids_config_from_json(const nlohmann::json& j);

// -- gate ----------------------------------------------------------------------

enum class GateDecision { Keep, ReAnchor, ReGround };
const char* decision_name(GateDecision d);

struct TrackerState {
  int anchor_frame = 0;
  int anchor_count = 0;
  int reliable_count = 0;
  double s = 1.0;
  double ds = 0.0;
};

/// Collapse (ds < -delta) takes precedence over drift (s < tau).
GateDecision gate_decision(double s, double ds, const GateConfig& cfg);

/// Evaluates frame t's tracking result against the state at t-1.
GateDecision gate_step(const TrackerState& prev, const TrackStep& result, const GateConfig& cfg,
                       TrackerState* next = nullptr);

struct GateEvent {
  int frame = 0;
  GateDecision decision = GateDecision::Keep;
  double s = 1.0;
  double ds = 0.0;
};

struct TrackingResult {
  std::vector<Mask> masks;            // per frame
  std::vector<TrackerState> history;  // per frame, after the gate
  std::vector<GateEvent> events;      // frames 1..N-1
  int count(GateDecision d) const;
};

/// Seeds anchors in the EE mask, steps the tracker and applies the gate.
TrackingResult track_rollout(const std::vector<scene::Frame>& frames, const Mask& initial_ee_mask,
                             const scene::InstructionId& instruction, const PerceptionSuite& suite,
                             const AidsConfig& cfg);

/// Up to `count` distinct mask pixels, seeded.
std::vector<Pixel> sample_anchors(const Mask& mask, int count, std::uint64_t seed);

// -- stages ----------------------------------------------------------------------

struct Grounding {
  Mask object;
  Mask ee;
  PoseEstimate initial;
};

/// Throws GroundingError when either mask is empty.
Grounding ground_scene(const scene::Frame& frame0, const scene::InstructionId& instruction,
                       const PerceptionSuite& suite, const scene::EndEffectorSpec& model);

/// True to accept. Rejects when the translation jump exceeds eps_t or the
/// geodesic rotation jump exceeds eps_R.
bool consistency_check(const RigidTransform& pose, const RigidTransform& previous, const FallbackConfig& cfg);

/// Mean of the back-projected valid-depth pixels under the mask; nullopt when
/// there are none.
std::optional<Vec3> recover_translation(const std::vector<double>& depth, const Mask& mask, const CameraIntrinsics& K);

enum class Provenance { Accepted, CentroidSlerp };
const char* provenance_name(Provenance p);

struct FrameEstimate {
  RigidTransform pose;
  double kappa = 0.0;
  bool accepted = false;
  std::optional<Vec3> centroid;  // for rejected frames
};

struct TrajectoryPoint {
  RigidTransform pose;
  Provenance provenance = Provenance::Accepted;
  double kappa = 0.0;
};

using EETrajectory = std::vector<TrajectoryPoint>;

/// Rejected frames: rotation slerped between the nearest accepted frames
/// (copied at the ends), translation from the centroid or, when that is
/// missing, interpolated linearly between the nearest known translations.
EETrajectory fill_rejected(const std::vector<FrameEstimate>& frames);

double grasp_score(const RigidTransform& candidate, const RigidTransform& ref, double lambda_t, double lambda_R);
/// Index of the lowest score; ties go to the lowest index.
std::size_t select_grasp(const std::vector<RigidTransform>& candidates, const RigidTransform& ref, double lambda_t,
                         double lambda_R);

struct Waypoint {
  int frame = 0;
  RigidTransform pose;
  bool gripper_open = true;
  std::string provenance;
  double kappa = 0.0;
};

using ActionSequence = std::vector<Waypoint>;

/// Index in 1..N-1 of the trajectory pose nearest to `target`.
int reference_index(const EETrajectory& traj, const Vec3& target);

/// Waypoints for frames 1..N-1 with the grasp replacing frame `ref_index`.
/// Translations use a centered moving average (truncated at the ends),
/// rotations an iterated slerp mean; the grasp waypoint is not smoothed.
ActionSequence synthesize_actions(const EETrajectory& traj, const RigidTransform& grasp, int ref_index, int window);

struct Diagnostics {
  nlohmann::json events = nlohmann::json::array();
  void add(int frame, const std::string& stage, const std::string& decision, nlohmann::json values = {});
};

struct ExtractResult {
  ActionSequence actions;
  EETrajectory trajectory;
  std::vector<FrameEstimate> estimates;
  TrackingResult tracking;
  Diagnostics diagnostics;
};

ExtractResult extract(const std::vector<scene::Frame>& frames, const scene::InstructionId& instruction,
                      const PerceptionSuite& suite, const AidsConfig& cfg, const CameraIntrinsics& K,
                      const scene::EndEffectorSpec& model = {});

nlohmann::json trajectory_json(const ActionSequence& actions);

}  // namespace geoworld::aids
