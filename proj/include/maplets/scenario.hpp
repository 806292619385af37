#pragma once

// End-to-end simulation: render and extract frames per agent, build the
// keyframe chain and maplets, exchange data at encounters, detect closures
// and optimize each agent's skeleton. Ground truth is kept beside the
// estimates for reporting only.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maplets/comms.hpp"
#include "maplets/config.hpp"
#include "maplets/depth_frame.hpp"
#include "maplets/maplet.hpp"
#include "maplets/plane_extract.hpp"
#include "maplets/ply.hpp"
#include "maplets/skeleton.hpp"
#include "maplets/world.hpp"

namespace maplets {

using FrameSink = std::function<void(std::uint16_t agent, std::size_t frame, const DepthFrame&)>;

struct AgentRun {
  AgentConfig config;
  std::vector<TrajectorySample> samples;
  std::vector<std::uint64_t> frame_point_bytes;  ///< raw point-cloud size per frame
  MapletGraph graph;
  std::vector<Pose2> keyframe_truth;  ///< world pose of every graph node
  std::vector<Maplet> maplets;
  std::vector<double> ready_time;           ///< when each maplet is closed
  std::vector<DeltaPoseFactor> deltas;      ///< maplet i -> i + 1

  std::uint64_t raw_bytes() const {
    std::uint64_t n = 0;
    for (auto b : frame_point_bytes) n += b;
    return n;
  }
  std::uint64_t maplet_bytes() const {
    std::uint64_t n = 0;
    for (const auto& m : maplets) n += m.serialized_size();
    return n;
  }
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t agent, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(agent), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

}  // namespace detail

/// Mapping pipeline of one agent, independent of every other agent.
inline AgentRun map_agent(const ScenarioConfig& cfg, const AgentConfig& agent,
                          const FrameSink& sink = {}) {
  AgentRun run;
  run.config = agent;
  run.samples = sample_trajectory(agent.trajectory);
  check_free_space(cfg.floorplan, run.samples, cfg.min_clearance);
  run.graph.agent = agent.id;

  auto depth_rng = detail::stream(cfg.seed, agent.id, 1);
  auto odo_rng = detail::stream(cfg.seed, agent.id, 2);
  const OdometryNoiseModel actual = cfg.odometry.scaled(cfg.odometry_noise_scale);
  // A noise-free run still needs an invertible information matrix.
  const OdometryNoiseModel believed = cfg.odometry.scaled(std::max(cfg.odometry_noise_scale, 1e-3));
  const Pose3 body_cam = body_from_camera(cfg.sensor);

  std::vector<FramePatches> pending;
  Pose2 kf_pose;
  double kf_time = 0.0;
  auto close_keyframe = [&] {
    run.graph.nodes.push_back(aggregate_keyframe(pending, cfg.decompose.merge,
                                                 static_cast<std::uint32_t>(run.graph.nodes.size()),
                                                 kf_time));
    run.keyframe_truth.push_back(kf_pose);
    pending.clear();
  };

  for (std::size_t i = 0; i < run.samples.size(); ++i) {
    const auto& sample = run.samples[i];
    DepthFrame frame = render_depth(cfg.floorplan, camera_in_world(sample.pose, cfg.sensor), cfg.sensor);
    add_depth_noise(frame, cfg.sensor, depth_rng);
    if (sink) sink(agent.id, i, frame);
    const std::size_t valid = frame.valid_count();
    run.frame_point_bytes.push_back(valid * kRawPointBytes);
    std::vector<PlanarPatch> patches;
    try {
      patches = quadtree_extract(frame, cfg.extract);
    } catch (const EmptyFrame&) {
    }

    if (i == 0) {
      kf_pose = sample.pose;
      kf_time = sample.time;
    } else if (should_create_keyframe(lift_se3(between(kf_pose, sample.pose)), cfg.keyframes)) {
      close_keyframe();
      const Pose2 motion = between(kf_pose, sample.pose);
      run.graph.edges.push_back({noisy_odometry(motion, actual, odo_rng), believed.covariance(motion)});
      kf_pose = sample.pose;
      kf_time = sample.time;
    }
    pending.push_back({lift_se3(between(kf_pose, sample.pose)) * body_cam, std::move(patches), valid});
  }
  close_keyframe();
  chain_graph_poses(run.graph);

  run.maplets = decompose_to_maplets(run.graph, cfg.decompose);
  const double end_time = run.samples.back().time;
  for (std::size_t k = 0; k < run.maplets.size(); ++k) {
    const auto& m = run.maplets[k];
    const std::size_t next = m.origin_hint.node_index + m.keyframes.size();
    run.ready_time.push_back(next < run.graph.nodes.size() ? run.graph.nodes[next].timestamp : end_time);
    if (k + 1 < run.maplets.size()) {
      const auto pc = maplet_delta(run.graph, m, run.maplets[k + 1]);
      DeltaPoseFactor f;
      f.from = {agent.id, m.index};
      f.to = {agent.id, run.maplets[k + 1].index};
      f.delta = pc.pose;
      f.cov = pc.covariance;
      f.kind = FactorKind::Odometry;
      run.deltas.push_back(f);
    }
  }
  return run;
}

/// World pose of every maplet origin. For evaluation only.
inline std::map<NodeKey, Pose2> ground_truth_maplet_origins(const std::vector<AgentRun>& runs) {
  std::map<NodeKey, Pose2> out;
  for (const auto& r : runs) {
    for (const auto& m : r.maplets) out[{m.agent, m.index}] = r.keyframe_truth.at(m.origin_hint.node_index);
  }
  return out;
}

struct ClosureRecord {
  double time = 0.0;
  std::uint16_t detector = 0;
  DeltaPoseFactor factor;
};

struct ScenarioResult {
  ScenarioConfig config;
  bool comms = true;
  std::vector<AgentRun> agents;
  std::vector<AgentStore> stores;
  BandwidthLedger ledger;
  std::size_t encounters = 0;
  std::vector<ClosureRecord> closures;
  std::vector<Skeleton> pre;   ///< initialized skeleton per agent
  std::vector<Skeleton> post;  ///< optimized skeleton per agent
  std::vector<OptimizeReport> reports;
};

struct RunOptions {
  std::optional<bool> comms;  ///< overrides the config when set
  FrameSink sink;
};

inline ScenarioResult run_scenario(const ScenarioConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  ScenarioResult res;
  res.config = cfg;
  res.comms = opts.comms.value_or(cfg.comms);
  for (const auto& a : cfg.agents) res.agents.push_back(map_agent(cfg, a, opts.sink));

  std::map<std::uint16_t, Pose2> hints;
  for (const auto& r : res.agents) {
    const Pose2 start = r.samples.front().pose;
    const Pose2 e = r.config.spawn_prior_error;
    hints[r.config.id] = {start.x + e.x, start.y + e.y, normalize_angle(start.theta + e.theta)};
  }
  for (const auto& r : res.agents) {
    AgentStore s(r.config.id);
    s.spawn_hints = hints;
    res.stores.push_back(std::move(s));
  }

  const std::size_t n = res.agents.size();
  std::map<std::pair<std::size_t, std::size_t>, Link> links;
  std::map<std::pair<std::size_t, std::size_t>, double> last_met;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      LinkModel m = cfg.link;
      const std::uint64_t base = cfg.link_seed_set ? cfg.link.seed : cfg.seed * 0x9E3779B97F4A7C15ULL;
      m.seed = base + 1000003ULL * (i * n + j);
      links.emplace(std::pair{i, j}, Link(m));
    }
  }

  std::vector<std::size_t> released(n, 0);
  auto release = [&](double t) {
    for (std::size_t i = 0; i < n; ++i) {
      auto& r = res.agents[i];
      while (released[i] < r.maplets.size() && r.ready_time[released[i]] <= t) {
        res.stores[i].add_own_maplet(r.maplets[released[i]]);
        if (released[i] < r.deltas.size()) res.stores[i].add_own_delta(r.deltas[released[i]]);
        ++released[i];
      }
    }
  };
  auto meet = [&](std::size_t i, std::size_t j, double t) {
    encounter(res.stores[i], res.stores[j], links.at({i, j}), res.ledger, t, res.encounters++, cfg.protocol);
    last_met[{i, j}] = t;
    for (std::size_t k : {i, j}) {
      auto& s = res.stores[k];
      s.refresh_skeleton(cfg.protocol.optimizer);
      for (const auto& f : detect_inter_agent_closures(s, cfg.protocol)) {
        res.closures.push_back({t, s.id(), f});
      }
    }
  };

  std::set<double> ticks;
  for (const auto& r : res.agents) {
    for (const auto& s : r.samples) ticks.insert(s.time);
  }
  for (double t : ticks) {
    release(t);
    if (!res.comms) continue;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const Eigen::Vector2d pi = trajectory_pose(res.agents[i].config.trajectory, t).translation();
        const Eigen::Vector2d pj = trajectory_pose(res.agents[j].config.trajectory, t).translation();
        if ((pi - pj).norm() > cfg.link.range) continue;
        const auto it = last_met.find({i, j});
        if (it != last_met.end() && t - it->second < cfg.encounter_interval) continue;
        meet(i, j, t);
      }
    }
  }
  release(std::numeric_limits<double>::infinity());
  // Regroup after the mission: every pair meets a few more times.
  if (res.comms) {
    const double t_end = ticks.empty() ? 0.0 : *ticks.rbegin();
    for (std::size_t round = 0; round < cfg.final_sync_rounds; ++round) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) meet(i, j, t_end);
      }
    }
  }

  for (auto& s : res.stores) {
    res.pre.push_back(s.build_skeleton());
    OptimizeReport rep;
    res.post.push_back(optimize(res.pre.back(), cfg.protocol.optimizer, &rep));
    res.reports.push_back(rep);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reporting.

struct BandwidthRow {
  std::uint16_t agent = 0;
  std::string representation;  ///< "point_cloud" or "maplet"
  std::size_t count = 0;
  std::uint64_t min_bytes = 0;
  std::uint64_t max_bytes = 0;
  double mean_bytes = 0.0;
};

inline std::vector<BandwidthRow> bandwidth_rows(const std::vector<AgentRun>& runs) {
  std::vector<BandwidthRow> rows;
  auto row = [&](std::uint16_t agent, const char* rep, const std::vector<std::uint64_t>& sizes) {
    if (sizes.empty()) return;
    BandwidthRow r{agent, rep, sizes.size(), *std::min_element(sizes.begin(), sizes.end()),
                   *std::max_element(sizes.begin(), sizes.end()), 0.0};
    for (auto s : sizes) r.mean_bytes += static_cast<double>(s);
    r.mean_bytes /= static_cast<double>(sizes.size());
    rows.push_back(r);
  };
  for (const auto& run : runs) {
    std::vector<std::uint64_t> maplets;
    for (const auto& m : run.maplets) maplets.push_back(m.serialized_size());
    row(run.config.id, "point_cloud", run.frame_point_bytes);
    row(run.config.id, "maplet", maplets);
  }
  return rows;
}

inline void write_bandwidth_csv(std::ostream& os, const std::vector<BandwidthRow>& rows) {
  os << "agent,representation,count,min_bytes,max_bytes,mean_bytes\n";
  for (const auto& r : rows) {
    std::ostringstream mean;
    mean << std::setprecision(17) << r.mean_bytes;
    os << r.agent << ',' << r.representation << ',' << r.count << ',' << r.min_bytes << ','
       << r.max_bytes << ',' << mean.str() << '\n';
  }
}

inline std::vector<BandwidthRow> read_bandwidth_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "agent,representation,count,min_bytes,max_bytes,mean_bytes") {
    throw FormatError("bad bandwidth csv header");
  }
  std::vector<BandwidthRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    BandwidthRow r;
    if (!(ls >> r.agent >> r.representation >> r.count >> r.min_bytes >> r.max_bytes >> r.mean_bytes)) {
      throw FormatError("bad bandwidth csv row");
    }
    rows.push_back(r);
  }
  return rows;
}

struct PoseError {
  double translation = 0.0;  ///< meters
  double rotation = 0.0;     ///< radians
};

inline PoseError pose_error(const Pose2& estimate, const Pose2& truth) {
  return {(estimate.translation() - truth.translation()).norm(),
          std::abs(normalize_angle(estimate.theta - truth.theta))};
}

/// Errors of the skeleton's node poses against the truth, both expressed
/// relative to the skeleton's root (its smallest key). Only nodes joined to
/// the root by factors are scored.
struct SkeletonErrors {
  NodeKey root;
  std::map<NodeKey, PoseError> nodes;
  PoseError max_own;
  PoseError max_cross;  ///< nodes of agents other than the root's
  std::size_t unanchored = 0;
};

inline SkeletonErrors skeleton_errors(const Skeleton& s, const std::map<NodeKey, Pose2>& truth) {
  SkeletonErrors out;
  if (s.poses.empty()) return out;
  out.root = s.poses.begin()->first;
  std::map<NodeKey, std::vector<NodeKey>> adj;
  for (const auto& f : s.factors) {
    adj[f.from].push_back(f.to);
    adj[f.to].push_back(f.from);
  }
  std::set<NodeKey> reached{out.root};
  std::vector<NodeKey> stack{out.root};
  while (!stack.empty()) {
    const NodeKey k = stack.back();
    stack.pop_back();
    for (const auto& o : adj[k]) {
      if (reached.insert(o).second) stack.push_back(o);
    }
  }
  const Pose2 est_root = s.poses.at(out.root);
  const Pose2 true_root = truth.at(out.root);
  for (const auto& [k, p] : s.poses) {
    if (!reached.count(k)) {
      ++out.unanchored;
      continue;
    }
    const PoseError e = pose_error(between(est_root, p), between(true_root, truth.at(k)));
    out.nodes[k] = e;
    PoseError& agg = k.agent == out.root.agent ? out.max_own : out.max_cross;
    agg.translation = std::max(agg.translation, e.translation);
    agg.rotation = std::max(agg.rotation, e.rotation);
  }
  return out;
}

inline nlohmann::json summary_json(const ScenarioResult& r) {
  using nlohmann::json;
  const auto truth = ground_truth_maplet_origins(r.agents);
  json j;
  j["scenario"] = r.config.name;
  j["seed"] = r.config.seed;
  j["comms"] = r.comms;

  std::uint64_t raw = 0, maplet = 0;
  std::size_t maplet_count = 0;
  json agents = json::array();
  for (const auto& a : r.agents) {
    raw += a.raw_bytes();
    maplet += a.maplet_bytes();
    maplet_count += a.maplets.size();
    json ja;
    ja["id"] = a.config.id;
    ja["frames"] = a.samples.size();
    ja["keyframes"] = a.graph.nodes.size();
    ja["maplets"] = a.maplets.size();
    ja["delta_poses"] = a.deltas.size();
    ja["raw_point_cloud_bytes"] = a.raw_bytes();
    ja["maplet_bytes"] = a.maplet_bytes();
    agents.push_back(ja);
  }
  j["agents"] = agents;

  json totals;
  totals["raw_point_cloud_bytes"] = raw;
  totals["maplet_bytes"] = maplet;
  totals["maplets"] = maplet_count;
  totals["mean_maplet_bytes"] = maplet_count ? static_cast<double>(maplet) / maplet_count : 0.0;
  totals["protocol_bytes"] = r.ledger.total();
  if (maplet > 0 && raw > 0) {
    totals["compression_ratio"] = static_cast<double>(raw) / static_cast<double>(maplet);
  } else {
    totals["compression_ratio"] = "n/a";
  }
  if (r.ledger.total() > 0 && raw > 0) {
    totals["protocol_ratio"] = static_cast<double>(raw) / static_cast<double>(r.ledger.total());
  } else {
    totals["protocol_ratio"] = "n/a";
  }
  j["totals"] = totals;

  json protocol;
  protocol["encounters"] = r.encounters;
  for (auto kind : {MessageKind::Digest, MessageKind::DeltaPoseBatch, MessageKind::ClosureBatch,
                    MessageKind::MapletPayload}) {
    protocol["bytes"][to_string(kind)] = r.ledger.total(kind);
  }
  j["protocol"] = protocol;

  json closures = json::array();
  for (const auto& c : r.closures) {
    json jc;
    jc["time"] = c.time;
    jc["detector"] = c.detector;
    jc["from"] = to_string(c.factor.from);
    jc["to"] = to_string(c.factor.to);
    jc["delta"] = {c.factor.delta.x, c.factor.delta.y, rad2deg(c.factor.delta.theta)};
    const PoseError e = pose_error(c.factor.delta, between(truth.at(c.factor.from), truth.at(c.factor.to)));
    jc["error_translation_m"] = e.translation;
    jc["error_rotation_deg"] = rad2deg(e.rotation);
    closures.push_back(jc);
  }
  j["closures"] = closures;

  json skeletons = json::array();
  for (std::size_t i = 0; i < r.stores.size(); ++i) {
    const auto& post = r.post[i];
    const auto err = skeleton_errors(post, truth);
    json js;
    js["agent"] = r.stores[i].id();
    js["root"] = to_string(err.root);
    js["nodes"] = post.poses.size();
    js["odometry_factors"] = post.count(FactorKind::Odometry);
    js["loop_closures"] = post.count(FactorKind::LoopClosure);
    js["chi2_initial"] = r.pre[i].chi2;
    js["chi2_final"] = post.chi2;
    js["iterations"] = r.reports[i].iterations;
    js["converged"] = r.reports[i].converged;
    js["max_error_translation_m"] = err.max_own.translation;
    js["max_error_rotation_deg"] = rad2deg(err.max_own.rotation);
    js["max_cross_agent_error_translation_m"] = err.max_cross.translation;
    js["max_cross_agent_error_rotation_deg"] = rad2deg(err.max_cross.rotation);
    js["unanchored_nodes"] = err.unanchored;
    skeletons.push_back(js);
  }
  j["skeletons"] = skeletons;
  return j;
}

inline void write_ground_truth_csv(std::ostream& out, const std::map<NodeKey, Pose2>& origins) {
  out << "agent,maplet,x,y,theta\n";
  for (const auto& [k, p] : origins) {
    std::ostringstream row;
    row << std::setprecision(17) << k.agent << ',' << k.maplet << ',' << p.x << ',' << p.y << ',' << p.theta;
    out << row.str() << '\n';
  }
}

inline std::map<NodeKey, Pose2> read_ground_truth_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "agent,maplet,x,y,theta") throw FormatError("missing ground truth header");
  std::map<NodeKey, Pose2> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    unsigned agent = 0, maplet = 0;
    Pose2 p;
    if (!(ls >> agent >> maplet >> p.x >> p.y >> p.theta)) throw FormatError("bad ground truth row: " + line);
    out[{static_cast<std::uint16_t>(agent), static_cast<std::uint16_t>(maplet)}] = p;
  }
  return out;
}

inline std::string agent_tag(std::uint16_t id) {
  std::ostringstream os;
  os << "agent" << id;
  return os.str();
}

/// Writes every artifact of a run below `dir`.
inline void write_outputs(const ScenarioResult& r, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "skeleton");
  fs::create_directories(dir / "maplets");
  auto open = [](const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
  };

  for (std::size_t i = 0; i < r.stores.size(); ++i) {
    const std::string tag = agent_tag(r.stores[i].id());
    write_skeleton(dir / "skeleton" / (tag + "_pre.txt"), r.pre[i]);
    write_skeleton(dir / "skeleton" / (tag + "_post.txt"), r.post[i]);
  }
  for (const auto& a : r.agents) {
    for (const auto& m : a.maplets) {
      std::ostringstream name;
      name << agent_tag(m.agent) << "_maplet" << std::setw(3) << std::setfill('0') << m.index << ".ply";
      write_ply(dir / "maplets" / name.str(), patch_mesh(m.planes),
                "maplet " + to_string(NodeKey{m.agent, m.index}) + " frame");
    }
  }
  {
    auto out = open(dir / "bandwidth.csv");
    write_bandwidth_csv(out, bandwidth_rows(r.agents));
  }
  {
    auto out = open(dir / "ledger.csv");
    r.ledger.write_csv(out);
  }
  {
    auto out = open(dir / "ground_truth.csv");
    write_ground_truth_csv(out, ground_truth_maplet_origins(r.agents));
  }
  {
    auto out = open(dir / "summary.json");
    out << summary_json(r).dump(2) << '\n';
  }
}

}  // namespace maplets
