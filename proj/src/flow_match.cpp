#include "geoworld/flow_match.hpp"

#include <string>

#include "geoworld/error.hpp"

namespace geoworld {

LatentTensor::LatentTensor(int f, int n, int c, Eigen::MatrixXd d)
    : frames(f), tokens(n), channels(c), data(std::move(d)) {
  if (data.rows() != static_cast<Eigen::Index>(f) * n || data.cols() != c)
    throw InvalidInputError("latent data does not match its declared shape");
}

namespace flow {

FlowSample interpolate(const LatentTensor& z0, const LatentTensor& z1, double t) {
  if (!z0.same_shape(z1)) throw InvalidInputError("interpolate: z0 and z1 shapes differ");
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidInputError("interpolate: t must lie in [0, 1]");
  FlowSample s;
  s.t = t;
  s.z_t = LatentTensor(z0.frames, z0.tokens, z0.channels, (1.0 - t) * z0.data + t * z1.data);
  s.v_target = LatentTensor(z0.frames, z0.tokens, z0.channels, z1.data - z0.data);
  return s;
}

double loss(const LatentTensor& v_pred, const LatentTensor& v_target) {
  if (!v_pred.same_shape(v_target)) throw InvalidInputError("flow loss: shape mismatch");
  if (v_pred.data.size() == 0) return 0.0;
  return (v_pred.data - v_target.data).squaredNorm() / static_cast<double>(v_pred.data.size());
}

LatentTensor euler_sample(const VelocityFn& velocity, const LatentTensor& z1, int steps) {
  if (steps < 1) throw InvalidInputError("euler_sample: steps must be >= 1");
  const double h = 1.0 / steps;
  LatentTensor z = z1;
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - k * h;
    const LatentTensor v = velocity(z, t);
    if (!v.same_shape(z)) throw InvalidInputError("euler_sample: velocity shape mismatch");
    if (!v.finite()) throw NumericalError("euler_sample: non-finite velocity at t=" + std::to_string(t));
    // dz/dt = v integrated backwards in time.
    z.data -= h * v.data;
  }
  return z;
}

}  // namespace flow
}  // namespace geoworld
