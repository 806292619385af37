#pragma once

// Scenario configuration: JSON with nested sections. Every key is optional
// and defaults to the value documented in the README; unknown keys and
// out-of-range values are rejected.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "maplets/comms.hpp"
#include "maplets/errors.hpp"
#include "maplets/maplet.hpp"
#include "maplets/plane_extract.hpp"
#include "maplets/skeleton.hpp"
#include "maplets/world.hpp"

namespace maplets {

struct AgentConfig {
  std::uint16_t id = 0;
  TrajectorySpec trajectory;
  /// Error of the shared start-pose prior (x, y, theta) relative to truth.
  Pose2 spawn_prior_error;
};

struct ScenarioConfig {
  std::string name = "scenario";
  std::uint64_t seed = 1;
  FloorPlan floorplan;
  SensorModel sensor;
  std::vector<AgentConfig> agents;
  double min_clearance = 0.2;
  ExtractParams extract;
  KeyframePolicy keyframes;
  DecomposeParams decompose;
  OdometryNoiseModel odometry;
  double odometry_noise_scale = 1.0;
  LinkModel link;
  bool link_seed_set = false;  ///< otherwise derived from `seed`
  bool comms = true;
  double encounter_interval = 5.0;
  std::size_t final_sync_rounds = 3;
  ProtocolParams protocol;

  void validate() const {
    floorplan.validate();
    if (sensor.width < 16 || sensor.height < 16) throw ConfigError("sensor must be at least 16x16");
    if (!(sensor.intrinsics.fx > 0.0F) || !(sensor.intrinsics.fy > 0.0F)) {
      throw ConfigError("sensor focal lengths must be positive");
    }
    if (!(sensor.max_range > 0.0)) throw ConfigError("sensor max_range must be positive");
    if (!(sensor.mount_height > 0.0)) throw ConfigError("sensor mount_height must be positive");
    if (!(sensor.noise_base >= 0.0) || !(sensor.noise_quadratic >= 0.0)) {
      throw ConfigError("depth noise must be non-negative");
    }
    if (agents.empty()) throw ConfigError("at least one agent is required");
    std::set<std::uint16_t> ids;
    for (const auto& a : agents) {
      if (!ids.insert(a.id).second) throw ConfigError("duplicate agent id " + std::to_string(a.id));
    }
    if (!(min_clearance >= 0.0)) throw ConfigError("min_clearance must be non-negative");
    if (!(extract.eps_fit > 0.0)) throw ConfigError("extraction.eps_fit must be positive");
    if (extract.max_patches < 1) throw ConfigError("extraction.max_patches must be at least 1");
    if (extract.min_leaf < 2) throw ConfigError("extraction.min_leaf must be at least 2");
    if (!(keyframes.min_translation > 0.0) || !(keyframes.min_rotation > 0.0)) {
      throw ConfigError("keyframe thresholds must be positive");
    }
    if (!(decompose.kappa_max > 0.0) || decompose.kappa_max > 2.0 * kPi) {
      throw ConfigError("maplets.kappa_max_deg must lie in (0, 360]");
    }
    if (decompose.size_cap < maplet_wire_size(1)) {
      throw ConfigError("maplets.size_cap_bytes must hold at least one patch");
    }
    if (!(odometry_noise_scale >= 0.0)) throw ConfigError("odometry.noise_scale must be non-negative");
    if (!(protocol.icap.tau_T > 0.0) || protocol.icap.max_iters < 1 || !(protocol.icap.eps_accept > 0.0)) {
      throw ConfigError("icap parameters must be positive");
    }
    link.validate();
    if (!(encounter_interval > 0.0)) throw ConfigError("comms.encounter_interval must be positive");
    if (!(protocol.overlap_radius > 0.0) || !(protocol.roi_radius > 0.0) ||
        !(protocol.proximity_radius >= 0.0)) {
      throw ConfigError("comms radii must be positive");
    }
    if (protocol.optimizer.max_iters < 1 || !(protocol.optimizer.tol_dx > 0.0) ||
        !(protocol.optimizer.lambda0 > 0.0)) {
      throw ConfigError("optimizer parameters must be positive");
    }
  }
};

namespace detail {

/// Reads keys from one JSON object and rejects the ones never asked for.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!j_.at(key).is_number_unsigned()) {
        throw ConfigError(path_ + "." + key + " must be a non-negative integer");
      }
    }
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + " has the wrong type");
    }
  }

  void read_deg(const std::string& key, double& radians) {
    double deg = rad2deg(radians);
    read(key, deg);
    radians = deg2rad(deg);
  }

  Section section(const std::string& key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return {j_.contains(key) ? j_.at(key) : empty, path_ + "." + key};
  }

  const nlohmann::json* raw(const std::string& key) {
    return has(key) ? &j_.at(key) : nullptr;
  }

  const std::string& path() const { return path_; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError("unknown key " + path_ + "." + k);
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline std::vector<double> numbers(const nlohmann::json& j, const std::string& path, std::size_t n) {
  if (!j.is_array() || j.size() != n) {
    throw ConfigError(path + " must be an array of " + std::to_string(n) + " numbers");
  }
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) throw ConfigError(path + " must contain numbers only");
    out.push_back(v.get<double>());
  }
  return out;
}

inline std::vector<std::vector<double>> rows(const nlohmann::json* j, const std::string& path,
                                             std::size_t n) {
  std::vector<std::vector<double>> out;
  if (!j) return out;
  if (!j->is_array()) throw ConfigError(path + " must be an array");
  for (std::size_t i = 0; i < j->size(); ++i) {
    out.push_back(numbers((*j)[i], path + "[" + std::to_string(i) + "]", n));
  }
  return out;
}

inline FloorPlan parse_floorplan(Section s) {
  FloorPlan plan;
  double wall_height = 2.5;
  bool floor = true, ceiling = false;
  s.read("wall_height", wall_height);
  s.read("floor", floor);
  s.read("ceiling", ceiling);
  if (!(wall_height > 0.0)) throw ConfigError(s.path() + ".wall_height must be positive");
  const auto bounds = s.raw("bounds");
  if (!bounds) throw ConfigError(s.path() + ".bounds is required");
  const auto b = numbers(*bounds, s.path() + ".bounds", 4);
  plan.lo = {b[0], b[1]};
  plan.hi = {b[2], b[3]};
  for (const auto& w : rows(s.raw("walls"), s.path() + ".walls", 4)) {
    plan.walls.push_back({{w[0], w[1]}, {w[2], w[3]}, 0.0, wall_height});
  }
  for (const auto& bx : rows(s.raw("boxes"), s.path() + ".boxes", 5)) {
    if (!(bx[4] > 0.0)) throw ConfigError(s.path() + ".boxes height must be positive");
    plan.add_box({std::min(bx[0], bx[2]), std::min(bx[1], bx[3])},
                 {std::max(bx[0], bx[2]), std::max(bx[1], bx[3])}, bx[4]);
  }
  if (floor) plan.slabs.push_back({plan.lo, plan.hi, 0.0});
  if (ceiling) plan.slabs.push_back({plan.lo, plan.hi, wall_height});
  s.finish();
  return plan;
}

inline SensorModel parse_sensor(Section s) {
  SensorModel m;
  s.read("width", m.width);
  s.read("height", m.height);
  double fx = m.intrinsics.fx, fy = m.intrinsics.fy;
  double cx = -1.0, cy = -1.0;
  s.read("fx", fx);
  s.read("fy", fy);
  s.read("cx", cx);
  s.read("cy", cy);
  m.intrinsics.fx = static_cast<float>(fx);
  m.intrinsics.fy = static_cast<float>(fy);
  m.intrinsics.cx = static_cast<float>(cx >= 0.0 ? cx : (m.width - 1) / 2.0);
  m.intrinsics.cy = static_cast<float>(cy >= 0.0 ? cy : (m.height - 1) / 2.0);
  s.read("mount_height", m.mount_height);
  s.read_deg("pitch_deg", m.pitch);
  s.read("max_range", m.max_range);
  s.read("noise_base", m.noise_base);
  s.read("noise_quadratic", m.noise_quadratic);
  s.finish();
  return m;
}

inline AgentConfig parse_agent(Section s) {
  AgentConfig a;
  s.read("id", a.id);
  auto& t = a.trajectory;
  const auto wp = s.raw("waypoints");
  if (!wp) throw ConfigError(s.path() + ".waypoints is required");
  for (const auto& p : rows(wp, s.path() + ".waypoints", 2)) t.waypoints.emplace_back(p[0], p[1]);
  s.read("speed", t.speed);
  s.read_deg("turn_rate_deg", t.turn_rate);
  s.read("frame_rate", t.frame_rate);
  s.read("start_time", t.start_time);
  if (const auto e = s.raw("spawn_prior_error")) {
    const auto v = numbers(*e, s.path() + ".spawn_prior_error", 3);
    a.spawn_prior_error = {v[0], v[1], deg2rad(v[2])};
  }
  s.finish();
  return a;
}

}  // namespace detail

inline ScenarioConfig parse_config(const nlohmann::json& j) {
  ScenarioConfig c;
  detail::Section root(j, "config");
  root.read("name", c.name);
  root.read("seed", c.seed);
  c.floorplan = detail::parse_floorplan(root.section("floorplan"));
  c.sensor = detail::parse_sensor(root.section("sensor"));
  {
    const auto* agents = root.raw("agents");
    if (!agents || !agents->is_array()) throw ConfigError("config.agents must be an array");
    for (std::size_t i = 0; i < agents->size(); ++i) {
      c.agents.push_back(detail::parse_agent({(*agents)[i], "config.agents[" + std::to_string(i) + "]"}));
    }
  }
  root.read("min_clearance", c.min_clearance);
  {
    auto s = root.section("extraction");
    s.read("eps_fit", c.extract.eps_fit);
    s.read("max_patches", c.extract.max_patches);
    s.read("min_leaf", c.extract.min_leaf);
    s.read("min_valid_fraction", c.extract.min_valid_fraction);
    s.read_deg("merge_angle_deg", c.extract.merge_angle_rad);
    s.read("merge_offset", c.extract.merge_offset);
    s.finish();
  }
  {
    auto s = root.section("keyframes");
    s.read("translation", c.keyframes.min_translation);
    s.read_deg("rotation_deg", c.keyframes.min_rotation);
    s.finish();
  }
  {
    auto s = root.section("maplets");
    s.read_deg("kappa_max_deg", c.decompose.kappa_max);
    s.read("size_cap_bytes", c.decompose.size_cap);
    s.read_deg("merge_angle_deg", c.decompose.merge.max_angle_rad);
    s.read("merge_offset", c.decompose.merge.max_offset);
    s.read("merge_gap", c.decompose.merge.max_gap);
    s.read_deg("salience_cluster_deg", c.decompose.salience.cluster_angle_rad);
    s.read("salience_radius", c.decompose.salience.boundary_radius);
    s.finish();
  }
  {
    auto s = root.section("odometry");
    s.read("noise_scale", c.odometry_noise_scale);
    s.read("sigma_xy_base", c.odometry.sigma_xy_base);
    s.read("sigma_xy_per_meter", c.odometry.sigma_xy_per_meter);
    s.read_deg("sigma_theta_base_deg", c.odometry.sigma_theta_base);
    s.read("sigma_theta_per_radian", c.odometry.sigma_theta_per_radian);
    s.finish();
  }
  {
    auto s = root.section("icap");
    s.read("tau", c.protocol.icap.tau_T);
    s.read("max_iters", c.protocol.icap.max_iters);
    s.read("eps_accept", c.protocol.icap.eps_accept);
    s.finish();
  }
  {
    auto s = root.section("comms");
    s.read("enabled", c.comms);
    s.read("range", c.link.range);
    s.read("drop_probability", c.link.drop_probability);
    if (s.has("seed")) {
      s.read("seed", c.link.seed);
      c.link_seed_set = true;
    }
    if (s.has("budget_bytes")) {
      std::size_t budget = 0;
      s.read("budget_bytes", budget);
      c.link.budget = budget;
    }
    s.read("encounter_interval", c.encounter_interval);
    s.read("final_sync_rounds", c.final_sync_rounds);
    s.read("salience_min", c.protocol.salience_min);
    s.read("proximity_radius", c.protocol.proximity_radius);
    s.read("overlap_radius", c.protocol.overlap_radius);
    s.read("roi_radius", c.protocol.roi_radius);
    s.read("max_closures_per_peer", c.protocol.max_closures_per_peer);
    s.finish();
  }
  {
    auto s = root.section("optimizer");
    s.read("max_iters", c.protocol.optimizer.max_iters);
    s.read("tol_dx", c.protocol.optimizer.tol_dx);
    s.read("lambda0", c.protocol.optimizer.lambda0);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline ScenarioConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

}  // namespace maplets
