#include <doctest.h>

#include <cmath>
#include <numbers>

#include "geoworld/error.hpp"
#include "geoworld/geometry.hpp"
#include "geoworld/rng.hpp"

using namespace geoworld;
using std::numbers::pi;

namespace {

Mat3 random_rotation(Rng& rng) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  return rotation_exp(axis * rng.uniform(0.0, pi * 0.999));
}

// Independent axis-angle oracle: Rodrigues from Eigen's AngleAxis.
Mat3 oracle_exp(const Vec3& w) {
  const double a = w.norm();
  if (a == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(a, w / a).toRotationMatrix();
}

}  // namespace

TEST_CASE("backproject examples") {
  const CameraIntrinsics K{100, 100, 50, 50};
  const Vec3 axis = backproject({50, 50}, 2.0, K);
  CHECK(axis.isApprox(Vec3(0, 0, 2)));
  const Vec3 off = backproject({60, 50}, 2.0, K);
  CHECK(off.x() == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(off.y() == 0.0);
  CHECK(off.z() == 2.0);

  CHECK_THROWS_AS(backproject({1, 1}, 0.0, K), InvalidInputError);
  CHECK_THROWS_AS(backproject({1, 1}, -1.0, K), InvalidInputError);
}

TEST_CASE("backproject / project roundtrip") {
  Rng rng(7);
  const CameraIntrinsics K{87.5, 91.0, 30.2, 33.9};
  for (int i = 0; i < 100; ++i) {
    const Pixel p{rng.uniform(-10, 70), rng.uniform(-10, 70)};
    const double d = rng.uniform(0.1, 20.0);
    const auto q = project(backproject(p, d, K), K);
    REQUIRE(q);
    CHECK(std::abs(q->u - p.u) < 1e-9);
    CHECK(std::abs(q->v - p.v) < 1e-9);
  }
}

TEST_CASE("project_correspondence examples") {
  const CameraIntrinsics K{100, 100, 50, 50};
  const RigidTransform id;
  const auto same = project_correspondence({12.5, 40.25}, 3.0, K, id, Vec3::Zero());
  REQUIRE(same);
  CHECK(same->u == doctest::Approx(12.5).epsilon(1e-14));
  CHECK(same->v == doctest::Approx(40.25).epsilon(1e-14));

  const auto fwd = RigidTransform::translation({0, 0, -1});
  const auto center = project_correspondence({50, 50}, 2.0, K, fwd, Vec3::Zero());
  REQUIRE(center);
  CHECK(center->u == 50.0);
  CHECK(center->v == 50.0);

  const auto moved = project_correspondence({60, 50}, 2.0, K, fwd, Vec3::Zero());
  REQUIRE(moved);
  CHECK(moved->u == doctest::Approx(70.0).epsilon(1e-14));
  CHECK(moved->v == doctest::Approx(50.0).epsilon(1e-14));

  // Moving the point behind the camera is reported, not clamped.
  CHECK_FALSE(project_correspondence({50, 50}, 2.0, K, RigidTransform::translation({0, 0, -2.5}), Vec3::Zero()));
  CHECK_FALSE(project_correspondence({50, 50}, 2.0, K, id, Vec3(0, 0, -2.0)));
}

TEST_CASE("geodesic distance") {
  const Mat3 I = Mat3::Identity();
  CHECK(geodesic_distance(I, I) == 0.0);
  CHECK(geodesic_distance(I, rotation_exp({0, 0, pi})) == doctest::Approx(pi).epsilon(1e-14));
  CHECK(geodesic_distance(I, rotation_exp({pi / 2, 0, 0})) == doctest::Approx(pi / 2).epsilon(1e-14));

  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Mat3 a = random_rotation(rng), b = random_rotation(rng);
    const double d = geodesic_distance(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= pi);
    CHECK(std::abs(d - geodesic_distance(b, a)) < 1e-12);
  }
}

TEST_CASE("slerp") {
  const Mat3 I = Mat3::Identity();
  const Mat3 Rz90 = rotation_exp({0, 0, pi / 2});
  CHECK(slerp(I, Rz90, 0.0).isApprox(I));
  CHECK(slerp(I, Rz90, 1.0).isApprox(Rz90));
  CHECK((slerp(I, Rz90, 0.5) - oracle_exp({0, 0, pi / 4})).cwiseAbs().maxCoeff() < 1e-14);
  CHECK_THROWS_AS(slerp(I, Rz90, 1.5), InvalidInputError);
  CHECK_THROWS_AS(slerp(I, Rz90, -0.1), InvalidInputError);

  SUBCASE("proportionality against the axis-angle oracle") {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
      const Mat3 a = random_rotation(rng), b = random_rotation(rng);
      const double u = rng.uniform();
      const Mat3 s = slerp(a, b, u);
      CHECK(is_rotation(s, 1e-12));
      CHECK(std::abs(geodesic_distance(a, s) - u * geodesic_distance(a, b)) < 1e-9);
      // Oracle: relative rotation as angle-axis, scale the angle.
      const Eigen::AngleAxisd rel(a.transpose() * b);
      const Mat3 expected = a * oracle_exp(rel.axis() * rel.angle() * u);
      CHECK((s - expected).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("rotation log near pi") {
  for (double angle : {pi, pi - 1e-6, pi - 1e-4, 3.0}) {
    const Vec3 axis = Vec3(1, -2, 0.5).normalized();
    const Mat3 R = rotation_exp(axis * angle);
    const Vec3 w = rotation_log(R);
    CHECK(std::abs(w.norm() - angle) < 1e-9);
    CHECK((rotation_exp(w) - R).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("compose and invert") {
  const RigidTransform id;
  const RigidTransform inv = invert(id);
  CHECK(inv.R().isApprox(Mat3::Identity()));
  CHECK(inv.T().norm() == 0.0);

  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const RigidTransform a(random_rotation(rng), Vec3(rng.normal(), rng.normal(), rng.normal()));
    const RigidTransform e = compose(invert(a), a);
    CHECK((e.R() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(e.T().norm() < 1e-9);
    const RigidTransform f = compose(a, invert(a));
    CHECK(f.T().norm() < 1e-9);
  }
  const auto c = compose(RigidTransform::translation({1, 2, 3}), RigidTransform::translation({-1, 0.5, 4}));
  CHECK(c.T().isApprox(Vec3(0, 2.5, 7)));

  Mat3 bad = Mat3::Identity();
  bad(0, 0) = -1;  // reflection
  CHECK_THROWS_AS(RigidTransform(bad, Vec3::Zero()), InvalidInputError);
}

TEST_CASE("look_at degeneracy") {
  CHECK_FALSE(look_at({0, 0, 1}, {0, 0, 1}, {0, 0, 1}));
  CHECK_FALSE(look_at({0, 0, 1}, {0, 0, 0}, {0, 0, 1}));
  const auto pose = look_at({0, -1, 0}, {0, 0, 0}, {0, 0, 1});
  REQUIRE(pose);
  // Target lands on the optical axis; world-up maps to camera -y.
  CHECK(pose->apply({0, 0, 0}).isApprox(Vec3(0, 0, 1)));
  CHECK((pose->R() * Vec3(0, 0, 1)).isApprox(Vec3(0, -1, 0)));
}
