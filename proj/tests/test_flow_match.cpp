#include <doctest.h>

#include <cmath>

#include "geoworld/error.hpp"
#include "geoworld/flow_match.hpp"
#include "geoworld/rng.hpp"

using namespace geoworld;

namespace {

LatentTensor scalar(double v) {
  LatentTensor z(1, 1, 1);
  z.data(0, 0) = v;
  return z;
}

LatentTensor random_latent(Rng& rng, int f, int n, int c) {
  LatentTensor z(f, n, c);
  for (Eigen::Index i = 0; i < z.data.size(); ++i) z.data.data()[i] = rng.normal();
  return z;
}

}  // namespace

TEST_CASE("interpolate follows the straight path") {
  const auto s = flow::interpolate(scalar(0.0), scalar(1.0), 0.3);
  CHECK(s.z_t.data(0, 0) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(s.v_target.data(0, 0) == 1.0);

  Rng rng(3);
  const auto z0 = random_latent(rng, 2, 3, 4), z1 = random_latent(rng, 2, 3, 4);
  CHECK(flow::interpolate(z0, z1, 0.0).z_t.data == z0.data);
  CHECK(flow::interpolate(z0, z1, 1.0).z_t.data == z1.data);
  CHECK(flow::interpolate(z0, z1, 0.2).v_target.data == flow::interpolate(z0, z1, 0.9).v_target.data);
}

TEST_CASE("interpolate rejects bad inputs") {
  CHECK_THROWS_AS(flow::interpolate(LatentTensor(1, 2, 3), LatentTensor(1, 3, 2), 0.5), InvalidInputError);
  CHECK_THROWS_AS(flow::interpolate(scalar(0), scalar(1), 1.5), InvalidInputError);
  CHECK_THROWS_AS(flow::interpolate(scalar(0), scalar(1), std::nan("")), InvalidInputError);
}

TEST_CASE("flow loss is a mean of squared differences") {
  CHECK(flow::loss(scalar(2.0), scalar(0.0)) == 4.0);
  Rng rng(4);
  const auto a = random_latent(rng, 2, 5, 3), b = random_latent(rng, 2, 5, 3);
  CHECK(flow::loss(a, a) == 0.0);
  CHECK(flow::loss(a, b) > 0.0);
  // Reversing the element order of both operands leaves the mean unchanged.
  LatentTensor ra = a, rb = b;
  ra.data = a.data.reshaped().reverse().reshaped(a.data.rows(), a.data.cols());
  rb.data = b.data.reshaped().reverse().reshaped(b.data.rows(), b.data.cols());
  CHECK(flow::loss(ra, rb) == doctest::Approx(flow::loss(a, b)).epsilon(1e-14));
  CHECK_THROWS_AS(flow::loss(LatentTensor(1, 2, 2), LatentTensor(2, 1, 2)), InvalidInputError);
}

TEST_CASE("constant velocity is integrated exactly") {
  // Dyadic values and power-of-two step counts make every update exact.
  LatentTensor z0(1, 2, 2), z1(1, 2, 2);
  z0.data << 0.5, -1.25, 2.0, 0.0;
  z1.data << -0.75, 0.25, 1.0, 3.5;
  for (int steps : {1, 2, 8, 64}) {
    const auto out = flow::euler_sample([&](const LatentTensor&, double) {
      LatentTensor v = z1;
      v.data = z1.data - z0.data;
      return v;
    }, z1, steps);
    CHECK(out.data == z0.data);
  }
  Rng rng(11);
  const auto a = random_latent(rng, 3, 4, 5), b = random_latent(rng, 3, 4, 5);
  for (int steps : {1, 7, 100}) {
    const auto out = flow::euler_sample([&](const LatentTensor&, double) {
      LatentTensor v = b;
      v.data = b.data - a.data;
      return v;
    }, b, steps);
    CHECK((out.data - a.data).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("zero velocity returns the starting latent") {
  Rng rng(12);
  const auto z1 = random_latent(rng, 2, 2, 2);
  const auto out = flow::euler_sample([](const LatentTensor& z, double) { return LatentTensor(z.frames, z.tokens, z.channels); }, z1, 10);
  CHECK(out.data == z1.data);
}

TEST_CASE("exponential field converges at first order") {
  const auto z1 = scalar(1.0);
  auto err = [&](int steps) {
    const auto out = flow::euler_sample([](const LatentTensor& z, double) {
      LatentTensor v = z;
      v.data = -z.data;
      return v;
    }, z1, steps);
    return std::abs(out.data(0, 0) - std::exp(1.0));
  };
  const double e10 = err(10), e100 = err(100), e1000 = err(1000);
  CHECK(e100 < e10);
  CHECK(e1000 < e100);
  for (double slope : {std::log10(e10 / e100), std::log10(e100 / e1000)}) {
    CHECK(slope > 0.8);
    CHECK(slope < 1.2);
  }
}

TEST_CASE("euler sampling surfaces non-finite velocities") {
  CHECK_THROWS_AS(flow::euler_sample([](const LatentTensor& z, double) {
    LatentTensor v = z;
    v.data.setConstant(std::nan(""));
    return v;
  }, scalar(1.0), 4), NumericalError);
  CHECK_THROWS_AS(flow::euler_sample([](const LatentTensor& z, double) { return z; }, scalar(1.0), 0), InvalidInputError);
}
