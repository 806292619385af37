#pragma once

// Synthetic indoor worlds: axis-aligned wall rectangles and horizontal slabs,
// ray-cast depth rendering, piecewise-linear trajectories and odometry noise.
// Ground truth produced here is for evaluation only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "maplets/depth_frame.hpp"
#include "maplets/errors.hpp"
#include "maplets/geometry.hpp"
#include "maplets/maplet.hpp"

namespace maplets {

/// Vertical rectangle over the ground segment a-b between heights z0 and z1.
struct WallRect {
  Eigen::Vector2d a = Eigen::Vector2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  double z0 = 0.0;
  double z1 = 2.5;
};

/// Horizontal rectangle at height z (floor, ceiling, box top).
struct SlabRect {
  Eigen::Vector2d lo = Eigen::Vector2d::Zero();
  Eigen::Vector2d hi = Eigen::Vector2d::Zero();
  double z = 0.0;
};

inline double point_segment_distance(const Eigen::Vector2d& p, const Eigen::Vector2d& a,
                                     const Eigen::Vector2d& b) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

struct FloorPlan {
  std::vector<WallRect> walls;
  std::vector<SlabRect> slabs;
  Eigen::Vector2d lo = Eigen::Vector2d::Zero();
  Eigen::Vector2d hi = Eigen::Vector2d::Zero();

  /// Adds a solid box: four walls and a top.
  void add_box(const Eigen::Vector2d& blo, const Eigen::Vector2d& bhi, double height) {
    const Eigen::Vector2d c01(blo.x(), bhi.y()), c10(bhi.x(), blo.y());
    walls.push_back({blo, c10, 0.0, height});
    walls.push_back({c10, bhi, 0.0, height});
    walls.push_back({bhi, c01, 0.0, height});
    walls.push_back({c01, blo, 0.0, height});
    slabs.push_back({blo, bhi, height});
  }

  /// Ground-plane distance from p to the nearest wall.
  double clearance(const Eigen::Vector2d& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& w : walls) best = std::min(best, point_segment_distance(p, w.a, w.b));
    return best;
  }

  bool inside_bounds(const Eigen::Vector2d& p) const {
    return p.x() >= lo.x() && p.y() >= lo.y() && p.x() <= hi.x() && p.y() <= hi.y();
  }

  /// Wall endpoints not within tol of any other wall (gaps in the shell).
  std::vector<Eigen::Vector2d> open_endpoints(double tol = 0.01) const {
    std::vector<Eigen::Vector2d> open;
    for (std::size_t i = 0; i < walls.size(); ++i) {
      for (const Eigen::Vector2d& e : {walls[i].a, walls[i].b}) {
        bool closed = false;
        for (std::size_t j = 0; j < walls.size() && !closed; ++j) {
          if (j != i && point_segment_distance(e, walls[j].a, walls[j].b) <= tol) closed = true;
        }
        if (!closed) open.push_back(e);
      }
    }
    return open;
  }

  void validate() const {
    if (!(hi.x() > lo.x() && hi.y() > lo.y())) throw ConfigError("floor plan bounds are empty");
    for (const auto& w : walls) {
      if ((w.b - w.a).norm() <= 1e-9) throw ConfigError("wall has zero length");
      if (!(w.z1 > w.z0)) throw ConfigError("wall has zero height");
    }
    for (const auto& s : slabs) {
      if (!(s.hi.x() > s.lo.x() && s.hi.y() > s.lo.y())) throw ConfigError("slab has zero area");
    }
  }
};

/// Depth camera rigidly mounted on a ground robot. The body frame has x
/// forward, y left, z up, origin on the floor; the camera looks along body x
/// with image x to the right and image y down.
struct SensorModel {
  std::uint32_t width = 320;
  std::uint32_t height = 240;
  Intrinsics intrinsics{300.0F, 300.0F, 159.5F, 119.5F};
  double mount_height = 1.0;
  double pitch = 0.0;  ///< radians, positive tilts the view down
  double max_range = 8.0;
  double noise_base = 0.0005;       ///< depth sigma at zero range, meters
  double noise_quadratic = 0.0005;  ///< sigma growth per squared meter of depth
};

/// Camera frame in the robot body frame.
inline Pose3 body_from_camera(const SensorModel& s) {
  Eigen::Matrix3d R;
  R.col(0) = Eigen::Vector3d(0, -1, 0);
  R.col(1) = Eigen::Vector3d(0, 0, -1);
  R.col(2) = Eigen::Vector3d(1, 0, 0);
  const Eigen::Matrix3d tilt =
      Eigen::AngleAxisd(s.pitch, Eigen::Vector3d::UnitY()).toRotationMatrix();
  return {tilt * R, Eigen::Vector3d(0, 0, s.mount_height)};
}

inline Pose3 camera_in_world(const Pose2& body, const SensorModel& s) {
  return lift_se3(body) * body_from_camera(s);
}

namespace detail {

inline double hit_wall(const WallRect& w, const Eigen::Vector3d& o, const Eigen::Vector3d& r) {
  const Eigen::Vector2d ab = w.b - w.a;
  const Eigen::Vector2d n(-ab.y(), ab.x());
  const double denom = n.x() * r.x() + n.y() * r.y();
  if (std::abs(denom) < 1e-15) return std::numeric_limits<double>::infinity();
  const double t = (n.dot(w.a) - n.x() * o.x() - n.y() * o.y()) / denom;
  if (!(t > 0.0)) return std::numeric_limits<double>::infinity();
  const Eigen::Vector3d p = o + t * r;
  const double s = (p.head<2>() - w.a).dot(ab) / ab.squaredNorm();
  if (s < 0.0 || s > 1.0 || p.z() < w.z0 || p.z() > w.z1) return std::numeric_limits<double>::infinity();
  return t;
}

inline double hit_slab(const SlabRect& s, const Eigen::Vector3d& o, const Eigen::Vector3d& r) {
  if (std::abs(r.z()) < 1e-15) return std::numeric_limits<double>::infinity();
  const double t = (s.z - o.z()) / r.z();
  if (!(t > 0.0)) return std::numeric_limits<double>::infinity();
  const Eigen::Vector3d p = o + t * r;
  if (p.x() < s.lo.x() || p.x() > s.hi.x() || p.y() < s.lo.y() || p.y() > s.hi.y()) {
    return std::numeric_limits<double>::infinity();
  }
  return t;
}

}  // namespace detail

/// Noise-free depth (along the optical axis) of the nearest surface per
/// pixel; NaN where nothing lies within max_range.
inline DepthFrame render_depth(const FloorPlan& plan, const Pose3& camera, const SensorModel& s) {
  DepthFrame frame(s.width, s.height, s.intrinsics);
  const Eigen::Vector3d o = camera.p;
  for (std::uint32_t v = 0; v < s.height; ++v) {
    for (std::uint32_t u = 0; u < s.width; ++u) {
      // Unit-z ray in the camera frame, so the hit parameter is the depth.
      const Eigen::Vector3d r = camera.R * s.intrinsics.ray(u, v);
      double best = std::numeric_limits<double>::infinity();
      for (const auto& w : plan.walls) best = std::min(best, detail::hit_wall(w, o, r));
      for (const auto& sl : plan.slabs) best = std::min(best, detail::hit_slab(sl, o, r));
      if (best <= s.max_range) frame.at(u, v) = static_cast<float>(best);
    }
  }
  return frame;
}

inline void add_depth_noise(DepthFrame& frame, const SensorModel& s, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (float& z : frame.depth) {
    if (!std::isfinite(z)) continue;
    const double sigma = s.noise_base + s.noise_quadratic * z * z;
    const double noisy = z + sigma * g(rng);
    z = noisy > 0.0 ? static_cast<float>(noisy) : std::numeric_limits<float>::quiet_NaN();
  }
}

// ---------------------------------------------------------------------------

/// Drive along waypoints at constant speed, turning in place at each
/// waypoint. Samples are taken at frame_rate starting at start_time.
/// A single waypoint is a stationary agent facing +x, sampled once.
struct TrajectorySpec {
  std::vector<Eigen::Vector2d> waypoints;
  double speed = 0.5;                 ///< m/s
  double turn_rate = deg2rad(40.0);   ///< rad/s
  double frame_rate = 2.0;            ///< Hz
  double start_time = 0.0;            ///< s
};

struct TrajectorySample {
  double time = 0.0;
  Pose2 pose;
};

namespace detail {

struct Leg {
  double duration;
  Pose2 start;
  double forward;  ///< meters driven (0 for a turn)
  double turn;     ///< radians turned (0 for a drive)
};

inline std::vector<Leg> plan_legs(const TrajectorySpec& spec) {
  if (spec.waypoints.empty()) throw ConfigError("trajectory needs at least one waypoint");
  if (!(spec.speed > 0.0) || !(spec.turn_rate > 0.0) || !(spec.frame_rate > 0.0)) {
    throw ConfigError("trajectory speed, turn rate and frame rate must be positive");
  }
  std::vector<Leg> legs;
  if (spec.waypoints.size() == 1) {
    legs.push_back({0.0, Pose2{spec.waypoints[0].x(), spec.waypoints[0].y(), 0.0}, 0.0, 0.0});
    return legs;
  }
  const Eigen::Vector2d d0 = spec.waypoints[1] - spec.waypoints[0];
  Pose2 pose{spec.waypoints[0].x(), spec.waypoints[0].y(), std::atan2(d0.y(), d0.x())};
  for (std::size_t i = 0; i + 1 < spec.waypoints.size(); ++i) {
    const Eigen::Vector2d d = spec.waypoints[i + 1] - spec.waypoints[i];
    const double len = d.norm();
    if (len <= 1e-9) throw ConfigError("repeated trajectory waypoint");
    const double heading = std::atan2(d.y(), d.x());
    const double turn = normalize_angle(heading - pose.theta);
    if (std::abs(turn) > 1e-12) {
      legs.push_back({std::abs(turn) / spec.turn_rate, pose, 0.0, turn});
      pose.theta = heading;
    }
    legs.push_back({len / spec.speed, pose, len, 0.0});
    pose.x = spec.waypoints[i + 1].x();
    pose.y = spec.waypoints[i + 1].y();
  }
  return legs;
}

inline Pose2 pose_on_leg(const Leg& leg, double tau) {
  const double f = leg.duration > 0.0 ? std::clamp(tau / leg.duration, 0.0, 1.0) : 1.0;
  Pose2 p = leg.start;
  p.x += f * leg.forward * std::cos(leg.start.theta);
  p.y += f * leg.forward * std::sin(leg.start.theta);
  p.theta = normalize_angle(leg.start.theta + f * leg.turn);
  return p;
}

}  // namespace detail

inline double trajectory_duration(const TrajectorySpec& spec) {
  double total = 0.0;
  for (const auto& leg : detail::plan_legs(spec)) total += leg.duration;
  return total;
}

/// Ground-truth pose at absolute time t (clamped to the trajectory).
inline Pose2 trajectory_pose(const TrajectorySpec& spec, double t) {
  const auto legs = detail::plan_legs(spec);
  double tau = t - spec.start_time;
  if (tau <= 0.0) return detail::pose_on_leg(legs.front(), 0.0);
  for (const auto& leg : legs) {
    if (tau <= leg.duration) return detail::pose_on_leg(leg, tau);
    tau -= leg.duration;
  }
  return detail::pose_on_leg(legs.back(), legs.back().duration);
}

/// Frame-rate samples from start to end; the final pose is always included.
inline std::vector<TrajectorySample> sample_trajectory(const TrajectorySpec& spec) {
  const auto legs = detail::plan_legs(spec);
  double total = 0.0;
  for (const auto& leg : legs) total += leg.duration;
  std::vector<TrajectorySample> out;
  const double dt = 1.0 / spec.frame_rate;
  const auto n = static_cast<std::size_t>(std::floor(total / dt + 1e-9));
  for (std::size_t k = 0; k <= n; ++k) {
    const double tau = static_cast<double>(k) * dt;
    out.push_back({spec.start_time + tau, trajectory_pose(spec, spec.start_time + tau)});
  }
  if (total - static_cast<double>(n) * dt > 1e-9) {
    out.push_back({spec.start_time + total, trajectory_pose(spec, spec.start_time + total)});
  }
  return out;
}

/// Throws ConfigError when a sample leaves the bounds or comes closer than
/// min_clearance to a wall.
inline void check_free_space(const FloorPlan& plan, const std::vector<TrajectorySample>& samples,
                             double min_clearance = 0.2) {
  for (const auto& s : samples) {
    const Eigen::Vector2d p = s.pose.translation();
    if (!plan.inside_bounds(p)) {
      throw ConfigError("trajectory leaves the floor plan at t = " + std::to_string(s.time));
    }
    if (plan.clearance(p) < min_clearance) {
      throw ConfigError("trajectory passes within " + std::to_string(min_clearance) +
                        " m of a wall at t = " + std::to_string(s.time));
    }
  }
}

/// True motion perturbed by zero-mean Gaussian noise with the model's
/// per-axis sigmas.
inline Pose2 noisy_odometry(const Pose2& motion, const OdometryNoiseModel& model, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  const Eigen::Vector3d s = model.sigmas(motion);
  const double ex = s[0] * g(rng), ey = s[1] * g(rng), eth = s[2] * g(rng);
  return {motion.x + ex, motion.y + ey, normalize_angle(motion.theta + eth)};
}

inline Pose2 noisy_odometry(const Pose2& motion, const OdometryNoiseModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return noisy_odometry(motion, model, rng);
}

}  // namespace maplets
