#pragma once

// Rectified-flow primitives: z_t = (1 - t) z0 + t z1 with target velocity
// v* = z1 - z0. Sampling integrates dz/dt = v from t = 1 (noise) down to
// t = 0 (data).

#include <Eigen/Core>
#include <functional>

namespace geoworld {

/// frames x tokens x channels, stored as a (frames * tokens) x channels matrix
/// with frame-major rows.
struct LatentTensor {
  int frames = 0;
  int tokens = 0;
  int channels = 0;
  Eigen::MatrixXd data;

  LatentTensor() = default;
  LatentTensor(int f, int n, int c) : frames(f), tokens(n), channels(c), data(Eigen::MatrixXd::Zero(f * n, c)) {}
  LatentTensor(int f, int n, int c, Eigen::MatrixXd d);

  bool same_shape(const LatentTensor& o) const {
    return frames == o.frames && tokens == o.tokens && channels == o.channels;
  }
  bool finite() const { return data.allFinite(); }
};

struct FlowSample {
  LatentTensor z_t;
  double t = 0.0;
  LatentTensor v_target;
};

namespace flow {

FlowSample interpolate(const LatentTensor& z0, const LatentTensor& z1, double t);

/// Mean over all elements of (v_pred - v_target)^2.
double loss(const LatentTensor& v_pred, const LatentTensor& v_target);

using VelocityFn = std::function<LatentTensor(const LatentTensor& z, double t)>;

/// Explicit Euler from t = 1 to t = 0 with `steps` uniform steps of size 1/steps.
/// Throws NumericalError when the velocity field returns non-finite values.
LatentTensor euler_sample(const VelocityFn& velocity, const LatentTensor& z1, int steps);

}  // namespace flow
}  // namespace geoworld
