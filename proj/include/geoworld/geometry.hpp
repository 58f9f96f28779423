#pragma once

// Pinhole camera and rigid-body geometry.
//
// Conventions: right-handed camera frame with +z forward and +y down, pixel
// origin at the top-left, integer coordinates at pixel centers. Depth is
// z-depth, not ray length.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <optional>

namespace geoworld {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using ScenePoint = Vec3;

struct Pixel {
  double u = 0.0;
  double v = 0.0;
};

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  /// Throws InvalidInputError unless fx, fy > 0 and all entries are finite.
  void validate() const;
  Mat3 matrix() const;
  Mat3 inverse() const;
};

/// World-to-camera style SE(3) element: x' = R x + T.
class RigidTransform {
 public:
  RigidTransform() : R_(Mat3::Identity()), T_(Vec3::Zero()) {}

  /// Validates R^T R = I and det R = +1 within `tol`; throws InvalidInputError otherwise.
  RigidTransform(const Mat3& R, const Vec3& T, double tol = 1e-9);

  static RigidTransform identity() { return {}; }
  static RigidTransform translation(const Vec3& T) { return {Mat3::Identity(), T}; }
  static RigidTransform from_rotvec(const Vec3& w, const Vec3& T);

  const Mat3& R() const { return R_; }
  const Vec3& T() const { return T_; }

  Vec3 apply(const Vec3& x) const { return R_ * x + T_; }

 private:
  Mat3 R_;
  Vec3 T_;
};

/// a∘b: apply b first, then a.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& a);

/// True when R is a rotation within `tol`.
bool is_rotation(const Mat3& R, double tol = 1e-9);

Mat3 rotation_exp(const Vec3& w);
/// Axis-angle vector with angle in [0, pi].
Vec3 rotation_log(const Mat3& R);
/// Rotation angle of R in [0, pi].
double rotation_angle(const Mat3& R);

/// Angle of R1^T R2; symmetric, in [0, pi].
double geodesic_distance(const Mat3& R1, const Mat3& R2);

/// Rotation at fraction u in [0, 1] along the geodesic from R1 to R2.
Mat3 slerp(const Mat3& R1, const Mat3& R2, double u);

/// D K^-1 p. Throws InvalidInputError for non-positive or non-finite depth.
ScenePoint backproject(const Pixel& p, double depth, const CameraIntrinsics& K);

/// Perspective projection; nullopt when z <= 1e-9 (behind or on the camera plane).
std::optional<Pixel> project(const ScenePoint& X, const CameraIntrinsics& K);

/// p_{t+1} ~ K [R D(p) K^-1 p + T + flow], normalized by the third coordinate.
/// `pose_rel` maps camera-t coordinates to camera-(t+1) coordinates and `flow`
/// is the point's own displacement expressed in camera-(t+1) coordinates.
/// nullopt when the moved point lands behind the camera.
std::optional<Pixel> project_correspondence(const Pixel& p, double depth, const CameraIntrinsics& K,
                                            const RigidTransform& pose_rel, const Vec3& flow);

/// Relative pose taking camera-a coordinates to camera-b coordinates, given
/// world-to-camera poses of both.
RigidTransform relative_pose(const RigidTransform& world_to_a, const RigidTransform& world_to_b);

/// Right-handed camera looking from `eye` at `target`; nullopt when the
/// configuration is degenerate (eye == target, or up parallel to the view).
std::optional<RigidTransform> look_at(const Vec3& eye, const Vec3& target, const Vec3& up);

}  // namespace geoworld
