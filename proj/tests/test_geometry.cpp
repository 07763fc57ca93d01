#include <gtest/gtest.h>

#include <random>

#include "egoman/geometry.hpp"
#include "egoman/trajectory.hpp"
#include "test_util.hpp"

using namespace egoman;
using egoman::testing::random_rotation;
using egoman::testing::random_vec;

namespace {

double max_abs_diff(const Mat3& a, const Mat3& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Rot6d, CanonicalBasisIsIdentity) {
  const RotationMatrix r = rot6d_to_matrix({{1, 0, 0, 0, 1, 0}});
  EXPECT_LT(max_abs_diff(r.matrix(), Mat3::Identity()), 1e-15);
}

TEST(Rot6d, ScaledBasisIsIdentity) {
  const RotationMatrix r = rot6d_to_matrix({{2, 0, 0, 0, 3, 0}});
  EXPECT_LT(max_abs_diff(r.matrix(), Mat3::Identity()), 1e-15);
}

TEST(Rot6d, QuarterTurnAboutZ) {
  // b1 = (0,1,0); rejection of (-1,0,0) is itself; b3 = b1 x b2 = (0,0,1).
  Mat3 expected;
  expected << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const RotationMatrix r = rot6d_to_matrix({{0, 1, 0, -1, 0, 0}});
  EXPECT_LT(max_abs_diff(r.matrix(), expected), 1e-15);
  EXPECT_LT(max_abs_diff(r.matrix(), RotationMatrix::rot_z(90).matrix()), 1e-15);
}

TEST(Rot6d, DegenerateInputsThrow) {
  EXPECT_THROW(rot6d_to_matrix({{0, 0, 0, 0, 1, 0}}), DegenerateRotation);
  EXPECT_THROW(rot6d_to_matrix({{1, 0, 0, 0, 1e-9, 0}}), DegenerateRotation);
  EXPECT_THROW(rot6d_to_matrix({{1, 0, 0, 2, 0, 0}}), DegenerateRotation);
  EXPECT_THROW(rot6d_to_matrix({{1, 0, 0, 2, 1e-10, 0}}), DegenerateRotation);
  EXPECT_THROW(rot6d_to_matrix({{std::nan(""), 0, 0, 0, 1, 0}}), DegenerateRotation);
}

TEST(Rot6d, RandomInputsGiveProperRotations) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    Rotation6D a;
    for (auto& x : a.a) x = n(rng);
    const Mat3 m = rot6d_to_matrix(a).matrix();
    EXPECT_LT(max_abs_diff(m.transpose() * m, Mat3::Identity()), 1e-9);
    EXPECT_NEAR(m.determinant(), 1.0, 1e-9);
  }
}

TEST(Rot6d, PerColumnScaleInvariance) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> s(0.01, 100.0);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    Rotation6D a;
    for (auto& x : a.a) x = n(rng);
    Rotation6D b = a;
    const double s1 = s(rng), s2 = s(rng);
    for (int c = 0; c < 3; ++c) {
      b.a[c] *= s1;
      b.a[3 + c] *= s2;
    }
    EXPECT_LT(max_abs_diff(rot6d_to_matrix(a).matrix(), rot6d_to_matrix(b).matrix()), 1e-9);
  }
}

TEST(Rot6d, MatrixRoundTrip) {
  EXPECT_EQ(matrix_to_rot6d(RotationMatrix::identity()), (Rotation6D{{1, 0, 0, 0, 1, 0}}));
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const RotationMatrix r = random_rotation(rng);
    const Rotation6D a = matrix_to_rot6d(r);
    const RotationMatrix back = rot6d_to_matrix(a);
    EXPECT_LT(max_abs_diff(back.matrix(), r.matrix()), 1e-9);
    // Idempotence of the projection.
    EXPECT_LT(max_abs_diff(rot6d_to_matrix(matrix_to_rot6d(back)).matrix(), back.matrix()), 1e-12);
  }
}

TEST(Rot6d, InvalidMatrixRejected) {
  Mat3 m = Mat3::Identity();
  m(0, 0) = 1.1;
  EXPECT_THROW(matrix_to_rot6d(m), InvalidRotation);
  EXPECT_THROW(matrix_to_rot6d(Mat3(-Mat3::Identity())), InvalidRotation);
}

TEST(Geodesic, CanonicalAngles) {
  std::mt19937_64 rng(4);
  const RotationMatrix r = random_rotation(rng);
  EXPECT_NEAR(geodesic_degrees(r, r), 0.0, 1e-6);
  EXPECT_NEAR(geodesic_degrees(RotationMatrix::identity(), RotationMatrix::identity()), 0.0, 1e-12);
  EXPECT_NEAR(geodesic_degrees(RotationMatrix::identity(), RotationMatrix::rot_z(90)), 90.0, 1e-9);
  EXPECT_NEAR(geodesic_degrees(RotationMatrix::identity(), RotationMatrix::rot_x(180)), 180.0, 1e-9);
}

TEST(Geodesic, SymmetricBoundedAndTriangle) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const RotationMatrix a = random_rotation(rng), b = random_rotation(rng), c = random_rotation(rng);
    const double ab = geodesic_degrees(a, b);
    EXPECT_NEAR(ab, geodesic_degrees(b, a), 1e-9);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 180.0);
    EXPECT_LE(geodesic_degrees(a, c), ab + geodesic_degrees(b, c) + 1e-6);
  }
}

TEST(RigidTransform, InverseAndAssociativity) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform a{random_rotation(rng), random_vec(rng)};
    const RigidTransform b{random_rotation(rng), random_vec(rng)};
    const RigidTransform c{random_rotation(rng), random_vec(rng)};
    const RigidTransform id = a * a.inverse();
    EXPECT_LT(max_abs_diff(id.rotation.matrix(), Mat3::Identity()), 1e-9);
    EXPECT_LT(id.translation.norm(), 1e-9);
    const RigidTransform l = (a * b) * c;
    const RigidTransform r = a * (b * c);
    EXPECT_LT(max_abs_diff(l.rotation.matrix(), r.rotation.matrix()), 1e-9);
    EXPECT_LT((l.translation - r.translation).norm(), 1e-9);
  }
}

TEST(Reanchor, IdentityAndTranslation) {
  std::mt19937_64 rng(7);
  Trajectory states;
  for (int i = 0; i < 5; ++i) states.push_back(egoman::testing::random_state(rng, 0.1 * i));
  const Trajectory same = reanchor(states, RigidTransform::identity());
  for (std::size_t i = 0; i < states.size(); ++i) {
    EXPECT_LT((same[i].left.position - states[i].left.position).norm(), 1e-12);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(same[i].right.rotation[c], states[i].right.rotation[c], 1e-12);
  }
  const Vec3 t(0.1, -0.2, 0.3);
  const Trajectory moved = reanchor(states, RigidTransform{RotationMatrix::identity(), t});
  for (std::size_t i = 0; i < states.size(); ++i) {
    EXPECT_LT((moved[i].left.position - states[i].left.position - t).norm(), 1e-12);
    EXPECT_LT((moved[i].right.position - states[i].right.position - t).norm(), 1e-12);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(moved[i].left.rotation[c], states[i].left.rotation[c], 1e-12);
  }
}

TEST(Reanchor, InverseRoundTripPreservesDistancesAndAngles) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Trajectory states;
    for (int i = 0; i < 4; ++i) states.push_back(egoman::testing::random_state(rng, 0.1 * i));
    const RigidTransform a{random_rotation(rng), random_vec(rng)};
    const Trajectory there = reanchor(states, a);
    const Trajectory back = reanchor(there, a.inverse());
    for (std::size_t i = 0; i < states.size(); ++i) {
      EXPECT_LT((back[i].left.position - states[i].left.position).norm(), 1e-9);
      EXPECT_LT(max_abs_diff(rot6d_to_matrix(back[i].right.rotation).matrix(),
                             rot6d_to_matrix(states[i].right.rotation).matrix()),
                1e-9);
      const double d0 = (states[i].left.position - states[i].right.position).norm();
      const double d1 = (there[i].left.position - there[i].right.position).norm();
      EXPECT_NEAR(d0, d1, 1e-9);
    }
    const double g0 = geodesic_degrees(states[0].left.rotation_matrix(), states[3].right.rotation_matrix());
    const double g1 = geodesic_degrees(there[0].left.rotation_matrix(), there[3].right.rotation_matrix());
    EXPECT_NEAR(g0, g1, 1e-6);
  }
}

TEST(Project, PrincipalPointAndOffsets) {
  CameraIntrinsics k;
  k.fx = 100;
  k.fy = 100;
  k.cx = 320;
  k.cy = 240;
  const Vec2 c = project(Vec3(0, 0, 1), k);
  EXPECT_DOUBLE_EQ(c.x(), 320.0);
  EXPECT_DOUBLE_EQ(c.y(), 240.0);
  EXPECT_DOUBLE_EQ(project(Vec3(1, 0, 2), k).x(), 370.0);  // 100 * (1/2) + 320
  EXPECT_THROW(project(Vec3(0, 0, -1), k), BehindCamera);
  EXPECT_THROW(project(Vec3(0, 0, 0), k), BehindCamera);
}

TEST(CameraIntrinsics, Validity) {
  CameraIntrinsics k;
  EXPECT_TRUE(k.valid());
  k.cx = 640;
  EXPECT_FALSE(k.valid());
  k = CameraIntrinsics{};
  k.fy = 0;
  EXPECT_FALSE(k.valid());
}
