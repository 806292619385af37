#pragma once

// Plane and rigid-transform primitives shared by every other module.
//
// Plane convention: n.x + d = 0 with |n| = 1 (Hesse normal form).
// A Pose3 maps coordinates of its source frame into its target frame,
// x_target = R * x_source + p.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "maplets/errors.hpp"

namespace maplets {

inline constexpr double kPi = std::numbers::pi;

inline constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double theta) {
  double r = std::remainder(theta, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

struct PlaneHNF {
  Eigen::Vector3d n = Eigen::Vector3d(0.0, 0.0, -1.0);
  double d = 0.0;

  Eigen::Vector4d coeffs() const { return {n.x(), n.y(), n.z(), d}; }
  double signed_distance(const Eigen::Vector3d& x) const { return n.dot(x) + d; }
  Eigen::Vector3d project(const Eigen::Vector3d& x) const {
    return x - signed_distance(x) * n;
  }
  PlaneHNF flipped() const { return {-n, -d}; }
};

/// Normalizes raw (a, b, c, d) coefficients to Hesse normal form and applies
/// the sensor-frame sign convention: n_z < 0, or when n_z == 0 the first
/// nonzero of (n_x, n_y) is negative.
inline PlaneHNF canonicalize_plane(const Eigen::Vector4d& raw) {
  const Eigen::Vector3d abc = raw.head<3>();
  const double norm = abc.norm();
  if (!(norm > 1e-9)) throw DegeneratePlane("plane normal magnitude below 1e-9");
  PlaneHNF plane{abc, raw[3]};
  // Already-unit inputs are left untouched so that canonicalization is
  // bit-exact idempotent.
  if (std::abs(norm - 1.0) > 4.0 * std::numeric_limits<double>::epsilon()) {
    plane.n /= norm;
    plane.d /= norm;
  }
  bool flip = false;
  if (plane.n.z() != 0.0) {
    flip = plane.n.z() > 0.0;
  } else if (plane.n.x() != 0.0) {
    flip = plane.n.x() > 0.0;
  } else {
    flip = plane.n.y() > 0.0;
  }
  return flip ? plane.flipped() : plane;
}

struct Pose3 {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d p = Eigen::Vector3d::Zero();

  static Pose3 identity() { return {}; }
  static Pose3 translation(const Eigen::Vector3d& t) { return {Eigen::Matrix3d::Identity(), t}; }
  static Pose3 rot_z(double yaw) {
    return {Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix(),
            Eigen::Vector3d::Zero()};
  }
  /// ZYX Euler angles: R = Rz(yaw) * Ry(pitch) * Rx(roll).
  static Pose3 from_rpy(double roll, double pitch, double yaw, const Eigen::Vector3d& t) {
    const Eigen::Matrix3d R = (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
                               Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
                                  .toRotationMatrix();
    return {R, t};
  }
  static Pose3 from_quaternion(const Eigen::Quaterniond& q, const Eigen::Vector3d& t) {
    return {q.normalized().toRotationMatrix(), t};
  }

  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(R); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
    T.topLeftCorner<3, 3>() = R;
    T.topRightCorner<3, 1>() = p;
    return T;
  }

  Eigen::Vector3d operator*(const Eigen::Vector3d& x) const { return R * x + p; }
};

inline Pose3 compose(const Pose3& a, const Pose3& b) { return {a.R * b.R, a.R * b.p + a.p}; }

inline Pose3 invert(const Pose3& t) {
  const Eigen::Matrix3d Rt = t.R.transpose();
  return {Rt, -(Rt * t.p)};
}

inline Pose3 operator*(const Pose3& a, const Pose3& b) { return compose(a, b); }

/// Rotation angle of R in radians, in [0, pi].
inline double rotation_angle(const Eigen::Matrix3d& R) {
  const double c = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

/// Expresses a plane given in the source frame of `t` in its target frame:
/// n' = R n, d' = d - p.(R n). The result is re-normalized but its sign is
/// not canonicalized.
inline PlaneHNF transform_plane(const Pose3& t, const PlaneHNF& plane) {
  Eigen::Vector3d n = t.R * plane.n;
  double d = plane.d - t.p.dot(n);
  const double s = n.norm();
  return {n / s, d / s};
}

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  static Pose2 identity() { return {}; }

  Eigen::Vector2d translation() const { return {x, y}; }
  Eigen::Vector3d vector() const { return {x, y, theta}; }
  Eigen::Matrix2d rotation() const {
    const double c = std::cos(theta), s = std::sin(theta);
    Eigen::Matrix2d R;
    R << c, -s, s, c;
    return R;
  }
  Eigen::Vector2d operator*(const Eigen::Vector2d& v) const {
    return rotation() * v + translation();
  }
};

inline Pose2 compose(const Pose2& a, const Pose2& b) {
  const double c = std::cos(a.theta), s = std::sin(a.theta);
  return {a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, normalize_angle(a.theta + b.theta)};
}

inline Pose2 invert(const Pose2& t) {
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  return {-(c * t.x + s * t.y), -(-s * t.x + c * t.y), normalize_angle(-t.theta)};
}

inline Pose2 operator*(const Pose2& a, const Pose2& b) { return compose(a, b); }

/// Relative pose of `to` seen from `from`: from^-1 * to.
inline Pose2 between(const Pose2& from, const Pose2& to) { return compose(invert(from), to); }
inline Pose3 between(const Pose3& from, const Pose3& to) { return compose(invert(from), to); }

/// Embeds a ground-plane pose into SE(3) as a yaw rotation at z = 0.
inline Pose3 lift_se3(const Pose2& pose, double z = 0.0) {
  Pose3 out = Pose3::rot_z(pose.theta);
  out.p = {pose.x, pose.y, z};
  return out;
}

struct Se2Projection {
  Pose2 pose;
  double roll = 0.0;
  double pitch = 0.0;
  bool gimbal_warning = false;  ///< |roll| or |pitch| above 0.2 rad
};

inline constexpr double kGimbalWarningAngle = 0.2;

/// Drops z, roll and pitch. Yaw comes from the ZYX Euler decomposition.
inline Se2Projection project_se2(const Pose3& t) {
  Se2Projection out;
  const Eigen::Matrix3d& R = t.R;
  const double yaw = std::atan2(R(1, 0), R(0, 0));
  out.pitch = std::asin(std::clamp(-R(2, 0), -1.0, 1.0));
  out.roll = std::atan2(R(2, 1), R(2, 2));
  out.pose = {t.p.x(), t.p.y(), normalize_angle(yaw)};
  out.gimbal_warning =
      std::abs(out.pitch) > kGimbalWarningAngle || std::abs(out.roll) > kGimbalWarningAngle;
  return out;
}

/// Angle between two plane normals in radians.
inline double normal_angle(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  return std::acos(std::clamp(a.dot(b), -1.0, 1.0));
}

/// True when both planes describe nearly the same oriented surface.
inline bool planes_close(const PlaneHNF& a, const PlaneHNF& b, double max_angle_rad,
                         double max_offset) {
  return a.n.dot(b.n) >= std::cos(max_angle_rad) && std::abs(a.d - b.d) <= max_offset;
}

}  // namespace maplets
