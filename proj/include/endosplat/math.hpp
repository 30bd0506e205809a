// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>

namespace endosplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Unit quaternion stored as (w, x, y, z).
using Quat = Eigen::Vector4d;

inline Quat identity_quat() { return Quat(1.0, 0.0, 0.0, 0.0); }

inline Quat normalized_quat(const Quat& q) {
  const double n = q.norm();
  return n > 0.0 ? Quat(q / n) : identity_quat();
}

/// Rotation matrix of a (not necessarily normalized) quaternion; normalizes first.
inline Mat3 quat_to_matrix(const Quat& q_in) {
  const Quat q = normalized_quat(q_in);
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
      2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

inline Quat matrix_to_quat(const Mat3& r) {
  Eigen::Quaterniond e(r);
  e.normalize();
  Quat q(e.w(), e.x(), e.y(), e.z());
  if (q[0] < 0.0) q = -q;
  return q;
}

inline Quat quat_multiply(const Quat& a, const Quat& b) {
  return Quat(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
              a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
              a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
              a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

inline Quat quat_conjugate(const Quat& q) { return Quat(q[0], -q[1], -q[2], -q[3]); }

inline Quat axis_angle_quat(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const double s = std::sin(0.5 * angle);
  return Quat(std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s);
}

/// Angle of the relative rotation between two unit quaternions, in [0, pi].
inline double quat_angle_between(const Quat& a, const Quat& b) {
  const double d = std::min(1.0, std::abs(a.dot(b)));
  return 2.0 * std::acos(d);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace endosplat
