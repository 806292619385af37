#pragma once

// Keyframe aggregation and the trajectory-curvature decomposition of a
// keyframe chain into overlapping maplets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "maplets/binary_io.hpp"
#include "maplets/errors.hpp"
#include "maplets/geometry.hpp"
#include "maplets/plane_extract.hpp"

namespace maplets {

struct Keyframe {
  std::uint32_t id = 0;
  Pose3 pose_in_maplet;  ///< keyframe body frame expressed in the enclosing frame
  std::vector<PlanarPatch> patches;  ///< in the keyframe frame
  double timestamp = 0.0;
  std::uint64_t raw_points = 0;  ///< valid depth samples aggregated into this keyframe
};

/// Diagonal odometry covariance: sigma_xy = base + per_meter * distance,
/// sigma_theta = base + per_radian * |rotation|, per keyframe edge.
struct OdometryNoiseModel {
  double sigma_xy_base = 0.02;
  double sigma_xy_per_meter = 0.01;
  double sigma_theta_base = deg2rad(0.5);
  double sigma_theta_per_radian = 0.02;

  OdometryNoiseModel scaled(double s) const {
    return {sigma_xy_base * s, sigma_xy_per_meter * s, sigma_theta_base * s,
            sigma_theta_per_radian * s};
  }

  Eigen::Vector3d sigmas(const Pose2& motion) const {
    const double dist = std::hypot(motion.x, motion.y);
    const double sxy = sigma_xy_base + sigma_xy_per_meter * dist;
    const double sth = sigma_theta_base + sigma_theta_per_radian * std::abs(motion.theta);
    return {sxy, sxy, sth};
  }

  Eigen::Matrix3d covariance(const Pose2& motion) const {
    return sigmas(motion).cwiseAbs2().asDiagonal();
  }
};

struct OdometryEdge {
  Pose2 delta;  ///< pose of node i+1 in the frame of node i
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Identity();
};

/// A keyframe chain of one agent. edges[i] links nodes[i] to nodes[i + 1];
/// each node's pose_in_maplet holds its pose in the chain's own frame.
struct MapletGraph {
  std::uint16_t agent = 0;
  std::vector<Keyframe> nodes;
  std::vector<OdometryEdge> edges;
};

struct OriginHint {
  std::uint32_t keyframe_id = 0;
  std::size_t node_index = 0;  ///< index of the origin keyframe in the source graph
  double timestamp = 0.0;
  Pose3 pose_in_graph;  ///< maplet frame in the agent's odometry frame
};

struct Maplet {
  std::uint16_t agent = 0;
  std::uint16_t index = 0;
  std::vector<Keyframe> keyframes;  ///< poses re-rooted so keyframes[0] is identity
  std::vector<PlanarPatch> planes;  ///< deduplicated, maplet frame
  OriginHint origin_hint;
  double salience = 0.0;
  double yaw_span = 0.0;  ///< accumulated |yaw change| along the keyframes

  std::size_t serialized_size() const;
  std::uint64_t raw_point_bytes() const {
    std::uint64_t n = 0;
    for (const auto& kf : keyframes) n += kf.raw_points;
    return n * kRawPointBytes;
  }
};

// ---------------------------------------------------------------------------
// Wire format: u16 agent, u16 index, u32 patch count, then per patch
// 4 f32 plane (nx, ny, nz, d), 12 f32 corners, f32 rms, u32 support.

inline constexpr std::size_t kMapletHeaderBytes = 8;

inline std::size_t maplet_wire_size(std::size_t patch_count) {
  return kMapletHeaderBytes + patch_count * kPatchBytes;
}

inline std::size_t Maplet::serialized_size() const { return maplet_wire_size(planes.size()); }

inline void encode_patch(ByteWriter& w, const PlanarPatch& p) {
  for (int i = 0; i < 3; ++i) w.f32(static_cast<float>(p.plane.n[i]));
  w.f32(static_cast<float>(p.plane.d));
  for (const auto& c : p.corners) {
    for (int i = 0; i < 3; ++i) w.f32(static_cast<float>(c[i]));
  }
  w.f32(static_cast<float>(p.rms));
  w.u32(p.support);
}

inline PlanarPatch decode_patch(ByteReader& r) {
  PlanarPatch p;
  for (int i = 0; i < 3; ++i) p.plane.n[i] = r.f32();
  p.plane.d = r.f32();
  for (auto& c : p.corners) {
    for (int i = 0; i < 3; ++i) c[i] = r.f32();
  }
  p.rms = r.f32();
  p.support = r.u32();
  return p;
}

inline std::vector<std::uint8_t> encode_maplet(const Maplet& m) {
  ByteWriter w;
  w.u16(m.agent);
  w.u16(m.index);
  w.u32(static_cast<std::uint32_t>(m.planes.size()));
  for (const auto& p : m.planes) encode_patch(w, p);
  return std::move(w).take();
}

/// Restores the shared part of a maplet (identity and planes).
inline Maplet decode_maplet(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Maplet m;
  m.agent = r.u16();
  m.index = r.u16();
  const std::uint32_t count = r.u32();
  if (r.remaining() != static_cast<std::size_t>(count) * kPatchBytes) {
    throw FormatError("maplet payload size does not match its patch count");
  }
  m.planes.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) m.planes.push_back(decode_patch(r));
  return m;
}

// ---------------------------------------------------------------------------

struct KeyframePolicy {
  double min_translation = 0.5;          ///< meters
  double min_rotation = deg2rad(15.0);   ///< radians
};

/// True once the sensor moved far enough from the last keyframe.
inline bool should_create_keyframe(const Pose3& motion_since_last,
                                   const KeyframePolicy& policy = {}) {
  return motion_since_last.p.norm() >= policy.min_translation ||
         rotation_angle(motion_since_last.R) >= policy.min_rotation;
}

/// Patches of one sensor frame and the pose of that sensor frame in the
/// keyframe frame.
struct FramePatches {
  Pose3 sensor_in_keyframe;
  std::vector<PlanarPatch> patches;  ///< sensor frame
  std::uint64_t raw_points = 0;
};

/// Orients a sensor-frame patch so its normal points at the sensor (the
/// sensor origin lies on the positive side of the plane).
inline PlanarPatch orient_toward_sensor(PlanarPatch p) {
  if (p.plane.d < 0.0) {
    p.plane = p.plane.flipped();
    std::swap(p.corners[1], p.corners[3]);
  }
  return p;
}

/// Tolerance for folding oriented observations of one surface together.
inline MergeTolerance oriented_merge() {
  MergeTolerance tol;
  tol.match_orientation = true;
  return tol;
}

inline Keyframe aggregate_keyframe(std::span<const FramePatches> frames,
                                   const MergeTolerance& tol = oriented_merge(), std::uint32_t id = 0,
                                   double timestamp = 0.0) {
  Keyframe kf;
  kf.id = id;
  kf.timestamp = timestamp;
  std::vector<PlanarPatch> all;
  for (const auto& f : frames) {
    kf.raw_points += f.raw_points;
    for (const auto& p : f.patches) {
      all.push_back(transform_patch(f.sensor_in_keyframe, orient_toward_sensor(p)));
    }
  }
  if (frames.size() == 1) {
    kf.patches = std::move(all);
  } else {
    kf.patches = deduplicate_patches(std::move(all), tol);
  }
  return kf;
}

// ---------------------------------------------------------------------------

/// Pose2 composition with first-order covariance propagation.
struct PoseWithCovariance {
  Pose2 pose;
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();
};

inline PoseWithCovariance compose_with_covariance(const PoseWithCovariance& a,
                                                  const PoseWithCovariance& b) {
  const double c = std::cos(a.pose.theta), s = std::sin(a.pose.theta);
  Eigen::Matrix3d Ja = Eigen::Matrix3d::Identity();
  Ja(0, 2) = -s * b.pose.x - c * b.pose.y;
  Ja(1, 2) = c * b.pose.x - s * b.pose.y;
  Eigen::Matrix3d Jb = Eigen::Matrix3d::Identity();
  Jb.topLeftCorner<2, 2>() << c, -s, s, c;
  return {compose(a.pose, b.pose),
          Ja * a.covariance * Ja.transpose() + Jb * b.covariance * Jb.transpose()};
}

/// Composed odometry from node `from` to node `to` (from <= to).
inline PoseWithCovariance chain_odometry(const MapletGraph& g, std::size_t from, std::size_t to) {
  PoseWithCovariance acc;
  for (std::size_t i = from; i < to; ++i) {
    acc = compose_with_covariance(acc, {g.edges[i].delta, g.edges[i].covariance});
  }
  return acc;
}

/// Fills every node's pose_in_maplet with its chained odometry pose in the
/// frame of node 0.
inline void chain_graph_poses(MapletGraph& g) {
  if (g.nodes.empty()) return;
  Pose2 pose;
  g.nodes[0].pose_in_maplet = lift_se3(pose);
  for (std::size_t i = 0; i + 1 < g.nodes.size(); ++i) {
    pose = compose(pose, g.edges[i].delta);
    g.nodes[i + 1].pose_in_maplet = lift_se3(pose);
  }
}

struct SalienceParams {
  double cluster_angle_rad = deg2rad(15.0);
  double boundary_radius = 1.0;  ///< meters, ground-plane distance
};

/// Counts distinct oriented normal directions (greedy clusters) among the
/// patches whose centroid lies near either end of the maplet trajectory.
inline double salience_score(const Maplet& m, const SalienceParams& params = {}) {
  if (m.keyframes.empty() || m.planes.empty()) return 0.0;
  const Eigen::Vector2d start = m.keyframes.front().pose_in_maplet.p.head<2>();
  const Eigen::Vector2d end = m.keyframes.back().pose_in_maplet.p.head<2>();
  const double cos_max = std::cos(params.cluster_angle_rad);
  std::vector<Eigen::Vector3d> clusters;
  for (const auto& p : m.planes) {
    const Eigen::Vector2d c = p.centroid().head<2>();
    if ((c - start).norm() > params.boundary_radius && (c - end).norm() > params.boundary_radius) {
      continue;
    }
    bool found = false;
    for (const auto& rep : clusters) {
      if (rep.dot(p.plane.n) >= cos_max) {
        found = true;
        break;
      }
    }
    if (!found) clusters.push_back(p.plane.n);
  }
  return static_cast<double>(clusters.size());
}

struct DecomposeParams {
  double kappa_max = deg2rad(90.0);
  std::size_t size_cap = 40 * 1024;  ///< serialized bytes per maplet
  MergeTolerance merge = oriented_merge();
  SalienceParams salience;
};

namespace detail {

inline std::vector<PlanarPatch> keyframe_patches_in(const Keyframe& kf, const Pose3& kf_in_maplet) {
  std::vector<PlanarPatch> out;
  out.reserve(kf.patches.size());
  for (const auto& p : kf.patches) out.push_back(transform_patch(kf_in_maplet, p));
  return out;
}

inline void clamp_to_cap(std::vector<PlanarPatch>& planes, std::size_t cap) {
  if (maplet_wire_size(planes.size()) <= cap) return;
  const std::size_t keep = cap > kMapletHeaderBytes ? (cap - kMapletHeaderBytes) / kPatchBytes : 0;
  std::stable_sort(planes.begin(), planes.end(),
                   [](const auto& a, const auto& b) { return a.support > b.support; });
  planes.resize(keep);
}

}  // namespace detail

/// Greedy curvature decomposition. Starting from the chain origin, keyframes
/// join the current maplet while the accumulated |yaw| from its start node
/// stays below kappa_max and its serialized size stays within size_cap. The
/// last keyframe of a maplet starts the next one, so consecutive maplets
/// share one keyframe. When a single edge alone turns by kappa_max or more no
/// overlap is possible and the next maplet starts after that edge.
inline std::vector<Maplet> decompose_to_maplets(const MapletGraph& g, const DecomposeParams& params) {
  if (g.nodes.empty()) throw EmptyGraph("keyframe graph has no nodes");
  if (!(params.kappa_max > 0.0)) throw std::invalid_argument("kappa_max must be positive");
  if (g.edges.size() + 1 != g.nodes.size()) {
    throw std::invalid_argument("keyframe graph must be a chain with nodes.size() - 1 edges");
  }

  // Node poses in the chain frame from odometry.
  std::vector<Pose2> chain(g.nodes.size());
  for (std::size_t i = 0; i + 1 < g.nodes.size(); ++i) chain[i + 1] = compose(chain[i], g.edges[i].delta);

  std::vector<Maplet> maplets;
  std::size_t start = 0;
  while (true) {
    Maplet m;
    m.agent = g.agent;
    m.index = static_cast<std::uint16_t>(maplets.size());
    const Pose3 origin = lift_se3(chain[start]);
    const Pose3 to_maplet = invert(origin);
    m.origin_hint = {g.nodes[start].id, start, g.nodes[start].timestamp, origin};

    auto add_node = [&](std::size_t i, std::vector<PlanarPatch> planes) {
      Keyframe kf = g.nodes[i];
      kf.pose_in_maplet = to_maplet * lift_se3(chain[i]);
      m.planes = std::move(planes);
      m.keyframes.push_back(std::move(kf));
    };

    {
      auto planes = detail::keyframe_patches_in(g.nodes[start], Pose3::identity());
      planes = deduplicate_patches(std::move(planes), params.merge);
      detail::clamp_to_cap(planes, params.size_cap);
      add_node(start, std::move(planes));
    }
    double curvature = 0.0;
    std::size_t end = start + 1;
    while (end < g.nodes.size()) {
      const double next = curvature + std::abs(g.edges[end - 1].delta.theta);
      if (!(next < params.kappa_max)) break;
      auto planes = m.planes;
      auto added = detail::keyframe_patches_in(g.nodes[end], to_maplet * lift_se3(chain[end]));
      planes.insert(planes.end(), added.begin(), added.end());
      planes = deduplicate_patches(std::move(planes), params.merge);
      if (maplet_wire_size(planes.size()) > params.size_cap) break;
      curvature = next;
      add_node(end, std::move(planes));
      ++end;
    }
    m.yaw_span = curvature;
    m.salience = salience_score(m, params.salience);
    const std::size_t last = start + m.keyframes.size() - 1;
    maplets.push_back(std::move(m));
    if (end >= g.nodes.size()) break;
    const bool sharp = std::abs(g.edges[last].delta.theta) >= params.kappa_max;
    start = (last > start && !sharp) ? last : last + 1;
  }
  return maplets;
}

inline std::vector<Maplet> decompose_to_maplets(const MapletGraph& g, double kappa_max) {
  DecomposeParams params;
  params.kappa_max = kappa_max;
  return decompose_to_maplets(g, params);
}

/// Odometry delta-pose and covariance between the origins of two maplets of
/// the same chain.
inline PoseWithCovariance maplet_delta(const MapletGraph& g, const Maplet& from, const Maplet& to) {
  return chain_odometry(g, from.origin_hint.node_index, to.origin_hint.node_index);
}

}  // namespace maplets
