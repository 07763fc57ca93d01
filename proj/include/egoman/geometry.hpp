#pragma once

// Rotation and projection algebra for wrist poses.
//
// Rotations are carried in the continuous 6D parameterization (the first two
// columns of a rotation matrix) and recovered by Gram-Schmidt. Everything in
// here is a pure function on small value types.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "egoman/error.hpp"

namespace egoman {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kDegenerateNorm = 1e-8;
inline constexpr double kRotationCheckTol = 1e-6;
inline constexpr double kMinDepth = 1e-6;

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// First two columns of a rotation matrix, stored column-major: (c0, c1).
struct Rotation6D {
  std::array<double, 6> a{1, 0, 0, 0, 1, 0};

  Vec3 first() const { return {a[0], a[1], a[2]}; }
  Vec3 second() const { return {a[3], a[4], a[5]}; }
  double& operator[](std::size_t i) { return a[i]; }
  double operator[](std::size_t i) const { return a[i]; }
  bool is_finite() const {
    return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
  }
  friend bool operator==(const Rotation6D&, const Rotation6D&) = default;
};

/// Orthogonal 3x3 matrix with determinant +1.
class RotationMatrix {
 public:
  RotationMatrix() : m_(Mat3::Identity()) {}

  /// Validates orthogonality and handedness; throws InvalidRotation.
  explicit RotationMatrix(const Mat3& m) : m_(m) {
    const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
    const double det = m.determinant();
    if (!m.allFinite() || ortho > kRotationCheckTol || std::abs(det - 1.0) > kRotationCheckTol) {
      throw InvalidRotation("matrix is not a proper rotation (orthogonality error " +
                            std::to_string(ortho) + ", det " + std::to_string(det) + ")");
    }
  }

  /// Skips validation. For matrices that are orthonormal by construction.
  static RotationMatrix trusted(const Mat3& m) {
    RotationMatrix r;
    r.m_ = m;
    return r;
  }

  static RotationMatrix identity() { return {}; }
  static RotationMatrix axis_angle(const Vec3& axis, double radians) {
    return trusted(Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix());
  }
  static RotationMatrix rot_x(double degrees) { return axis_angle(Vec3::UnitX(), deg2rad(degrees)); }
  static RotationMatrix rot_y(double degrees) { return axis_angle(Vec3::UnitY(), deg2rad(degrees)); }
  static RotationMatrix rot_z(double degrees) { return axis_angle(Vec3::UnitZ(), deg2rad(degrees)); }

  const Mat3& matrix() const { return m_; }
  RotationMatrix transpose() const { return trusted(m_.transpose()); }
  RotationMatrix operator*(const RotationMatrix& o) const { return trusted(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

 private:
  Mat3 m_;
};

/// Gram-Schmidt on the two 3-vectors. Throws DegenerateRotation when either
/// vector, or the rejection of the second from the first, is shorter than 1e-8.
inline RotationMatrix rot6d_to_matrix(const Rotation6D& r) {
  if (!r.is_finite()) throw DegenerateRotation("6D rotation has non-finite entries");
  const Vec3 a1 = r.first();
  const Vec3 a2 = r.second();
  const double n1 = a1.norm();
  const double n2 = a2.norm();
  if (n1 < kDegenerateNorm || n2 < kDegenerateNorm) {
    throw DegenerateRotation("6D rotation has a near-zero column");
  }
  const Vec3 b1 = a1 / n1;
  const Vec3 u2 = a2 - b1.dot(a2) * b1;
  const double nu = u2.norm();
  if (nu < kDegenerateNorm) throw DegenerateRotation("6D rotation columns are near-parallel");
  const Vec3 b2 = u2 / nu;
  Mat3 m;
  m.col(0) = b1;
  m.col(1) = b2;
  m.col(2) = b1.cross(b2);
  return RotationMatrix::trusted(m);
}

inline Rotation6D matrix_to_rot6d(const RotationMatrix& r) {
  const Mat3& m = r.matrix();
  return {{m(0, 0), m(1, 0), m(2, 0), m(0, 1), m(1, 1), m(2, 1)}};
}

/// Validating overload for raw matrices; throws InvalidRotation.
inline Rotation6D matrix_to_rot6d(const Mat3& m) { return matrix_to_rot6d(RotationMatrix(m)); }

/// Angle of r1^T r2 in degrees, in [0, 180].
inline double geodesic_degrees(const RotationMatrix& r1, const RotationMatrix& r2) {
  const double tr = (r1.matrix().transpose() * r2.matrix()).trace();
  const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  return rad2deg(std::acos(c));
}

/// Geodesic interpolation R0 * exp(s * log(R0^T R1)), s in [0, 1].
inline RotationMatrix slerp(const RotationMatrix& r0, const RotationMatrix& r1, double s) {
  const Eigen::AngleAxisd rel((r0.matrix().transpose() * r1.matrix()).eval());
  const Mat3 step = Eigen::AngleAxisd(rel.angle() * s, rel.axis()).toRotationMatrix();
  return RotationMatrix::trusted(r0.matrix() * step);
}

/// x' = R x + t.
struct RigidTransform {
  RotationMatrix rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform operator*(const RigidTransform& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation};
  }
  RigidTransform inverse() const {
    const RotationMatrix rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }
};

struct CameraIntrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 320.0;
  double cy = 240.0;
  int width = 640;
  int height = 480;

  bool valid() const {
    return fx > 0 && fy > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
  }
  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

/// Pinhole projection to pixels. The result may fall outside the image.
inline Vec2 project(const Vec3& p, const CameraIntrinsics& k) {
  if (!(p.z() > kMinDepth)) throw BehindCamera("point has depth " + std::to_string(p.z()));
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

}  // namespace egoman
