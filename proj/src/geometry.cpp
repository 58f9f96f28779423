#include "geoworld/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "geoworld/error.hpp"

namespace geoworld {

namespace {

Vec3 vee(const Mat3& A) { return {A(2, 1) - A(1, 2), A(0, 2) - A(2, 0), A(1, 0) - A(0, 1)}; }

Mat3 hat(const Vec3& w) {
  Mat3 K;
  K << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return K;
}

}  // namespace

void CameraIntrinsics::validate() const {
  if (!(std::isfinite(fx) && std::isfinite(fy) && std::isfinite(cx) && std::isfinite(cy)))
    throw InvalidInputError("camera intrinsics must be finite");
  if (!(fx > 0.0 && fy > 0.0)) throw InvalidInputError("focal lengths must be positive");
}

Mat3 CameraIntrinsics::matrix() const {
  Mat3 K;
  K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return K;
}

Mat3 CameraIntrinsics::inverse() const {
  Mat3 Ki;
  Ki << 1.0 / fx, 0, -cx / fx, 0, 1.0 / fy, -cy / fy, 0, 0, 1;
  return Ki;
}

bool is_rotation(const Mat3& R, double tol) {
  if (!R.allFinite()) return false;
  const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

RigidTransform::RigidTransform(const Mat3& R, const Vec3& T, double tol) : R_(R), T_(T) {
  if (!is_rotation(R, tol)) throw InvalidInputError("rotation matrix is not in SO(3)");
  if (!T.allFinite()) throw InvalidInputError("translation must be finite");
}

RigidTransform RigidTransform::from_rotvec(const Vec3& w, const Vec3& T) {
  return {rotation_exp(w), T};
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.R() * b.R(), a.R() * b.T() + a.T(), 1e-8};
}

RigidTransform invert(const RigidTransform& a) {
  const Mat3 Rt = a.R().transpose();
  return {Rt, -(Rt * a.T()), 1e-8};
}

Mat3 rotation_exp(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 K = hat(w);
  if (theta < 1e-8) return Mat3::Identity() + K + 0.5 * K * K;
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * K + b * K * K;
}

double rotation_angle(const Mat3& R) {
  // atan2 keeps full precision near 0 and near pi, where acos does not.
  const double s = 0.5 * vee(R).norm();
  const double c = 0.5 * (R.trace() - 1.0);
  return std::atan2(s, c);
}

Vec3 rotation_log(const Mat3& R) {
  const double theta = rotation_angle(R);
  const Vec3 v = vee(R);
  if (theta < 1e-8) return 0.5 * v;
  if (std::numbers::pi - theta > 1e-3) return (theta / (2.0 * std::sin(theta))) * v;

  // Near pi: recover the axis from the symmetric part, a a^T = (S - cos I) / (1 - cos).
  const double c = std::cos(theta);
  const Mat3 S = 0.5 * (R + R.transpose());
  const Mat3 A = (S - c * Mat3::Identity()) / (1.0 - c);
  int k = 0;
  A.diagonal().maxCoeff(&k);
  Vec3 axis = A.col(k) / std::sqrt(std::max(A(k, k), 1e-300));
  axis.normalize();
  if (axis.dot(v) < 0.0) axis = -axis;
  return theta * axis;
}

double geodesic_distance(const Mat3& R1, const Mat3& R2) {
  return rotation_angle(R1.transpose() * R2);
}

Mat3 slerp(const Mat3& R1, const Mat3& R2, double u) {
  if (!(u >= 0.0 && u <= 1.0)) throw InvalidInputError("slerp fraction must lie in [0, 1]");
  if (u == 0.0) return R1;
  if (u == 1.0) return R2;
  return R1 * rotation_exp(u * rotation_log(R1.transpose() * R2));
}

ScenePoint backproject(const Pixel& p, double depth, const CameraIntrinsics& K) {
  if (!(depth > 0.0) || !std::isfinite(depth))
    throw InvalidInputError("backproject: depth must be positive and finite, got " +
                            std::to_string(depth));
  return {depth * (p.u - K.cx) / K.fx, depth * (p.v - K.cy) / K.fy, depth};
}

std::optional<Pixel> project(const ScenePoint& X, const CameraIntrinsics& K) {
  if (!(X.z() > 1e-9)) return std::nullopt;
  return Pixel{K.fx * X.x() / X.z() + K.cx, K.fy * X.y() / X.z() + K.cy};
}

std::optional<Pixel> project_correspondence(const Pixel& p, double depth, const CameraIntrinsics& K,
                                            const RigidTransform& pose_rel, const Vec3& flow) {
  const ScenePoint X = backproject(p, depth, K);
  return project(pose_rel.apply(X) + flow, K);
}

RigidTransform relative_pose(const RigidTransform& world_to_a, const RigidTransform& world_to_b) {
  return compose(world_to_b, invert(world_to_a));
}

std::optional<RigidTransform> look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 forward = target - eye;
  if (forward.norm() < 1e-12) return std::nullopt;
  const Vec3 z = forward.normalized();
  const Vec3 x_raw = z.cross(up);
  if (x_raw.norm() < 1e-9 * std::max(1.0, up.norm())) return std::nullopt;
  // Camera +y points "down" in the image, i.e. against `up`.
  const Vec3 x = x_raw.normalized();
  const Vec3 y = z.cross(x);
  Mat3 R;  // rows are the camera axes in world coordinates
  R.row(0) = x.transpose();
  R.row(1) = y.transpose();
  R.row(2) = z.transpose();
  return RigidTransform(R, -(R * eye), 1e-9);
}

}  // namespace geoworld
