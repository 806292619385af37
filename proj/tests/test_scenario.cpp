#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "maplets/config.hpp"
#include "maplets/ply.hpp"
#include "maplets/scenario.hpp"

using namespace maplets;
namespace fs = std::filesystem;

namespace {

const fs::path kScenarios = MAPLETS_SCENARIO_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("maplets_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

nlohmann::json minimal_config() {
  return nlohmann::json::parse(R"({
    "floorplan": {"bounds": [-2, -2, 2, 6], "walls": [[-1, -1, -1, 5], [1, -1, 1, 5]]},
    "agents": [{"id": 0, "waypoints": [[0, 0], [0, 3]]}]
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return files;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MAPLETS_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, MinimalConfigTakesDefaults) {
  const ScenarioConfig c = parse_config(minimal_config());
  EXPECT_EQ(c.agents.size(), 1u);
  EXPECT_NEAR(c.decompose.kappa_max, deg2rad(90.0), 1e-12);
  EXPECT_NEAR(c.protocol.roi_radius, 2.5, 1e-12);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, UnknownKeysAreRejected) {
  auto j = minimal_config();
  j["icap"]["tau_t"] = 1e-9;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = minimal_config();
  j["agents"][0]["sped"] = 1.0;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = minimal_config();
  j["extras"] = true;
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, ZeroCurvatureBudgetIsInvalid) {
  auto j = minimal_config();
  j["maplets"]["kappa_max_deg"] = 0;
  EXPECT_THROW(parse_config(j).validate(), ConfigError);
}

TEST(Config, BundledScenariosAreValid) {
  for (const char* name : {"two_agent_loop.json", "straight_hallway.json", "desk.json"}) {
    SCOPED_TRACE(name);
    EXPECT_NO_THROW(load_config(kScenarios / name).validate());
  }
}

TEST(Cli, BadConfigExitsNonzero) {
  const fs::path dir = scratch("cli_bad");
  auto j = minimal_config();
  j["maplets"]["kappa_max_deg"] = 0;
  std::ofstream(dir / "bad.json") << j.dump();
  EXPECT_NE(run_cli("run " + (dir / "bad.json").string() + " --out " + (dir / "out").string()), 0);
  std::ofstream(dir / "broken.json") << "{\"floorplan\": ";
  EXPECT_NE(run_cli("run " + (dir / "broken.json").string() + " --out " + (dir / "out").string()), 0);
  EXPECT_NE(run_cli("run " + (dir / "missing.json").string()), 0);
}

TEST(Cli, WritesEveryArtifact) {
  const fs::path dir = scratch("cli_ok");
  ASSERT_EQ(run_cli("run " + (kScenarios / "straight_hallway.json").string() + " --out " + dir.string() +
                    " --emit-frames"),
            0);
  for (const char* f : {"summary.json", "bandwidth.csv", "ledger.csv", "ground_truth.csv",
                        "skeleton/agent0_pre.txt", "skeleton/agent0_post.txt", "maplets/agent0_maplet000.ply",
                        "frames/agent0_frame0000.depth"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
}

TEST(Scenario, StraightHallwayOptimumIsTheChainedInitialization) {
  const auto r = run_scenario(load_config(kScenarios / "straight_hallway.json"));
  ASSERT_EQ(r.post.size(), 1u);
  const Skeleton& pre = r.pre[0];
  const Skeleton& post = r.post[0];
  ASSERT_GE(pre.poses.size(), 3u);
  EXPECT_LT(pre.chi2, 1e-12);
  EXPECT_LT(post.chi2, 1e-12);
  for (const auto& [k, p] : pre.poses) {
    const Pose2& q = post.poses.at(k);
    EXPECT_NEAR(q.x, p.x, 1e-9);
    EXPECT_NEAR(q.y, p.y, 1e-9);
    EXPECT_NEAR(normalize_angle(q.theta - p.theta), 0.0, 1e-9);
  }
}

TEST(Scenario, StaticAgentOriginIsItsSpawnPose) {
  auto j = minimal_config();
  j["agents"][0]["waypoints"] = {{0.2, 1.5}};
  const auto r = run_scenario(parse_config(j));
  const auto truth = ground_truth_maplet_origins(r.agents);
  ASSERT_EQ(truth.size(), 1u);
  const Pose2 origin = truth.begin()->second;
  EXPECT_EQ(origin.x, 0.2);
  EXPECT_EQ(origin.y, 1.5);
  EXPECT_EQ(origin.theta, 0.0);
}

TEST(Scenario, CurvatureCutLandsAtTheCorridorJunction) {
  auto j = nlohmann::json::parse(R"({
    "seed": 5,
    "floorplan": {"bounds": [-1.5, -6.5, 6.5, 1.5],
                  "walls": [[-1, -6, -1, 1], [-1, 1, 6, 1], [1, -6, 1, -1], [1, -1, 6, -1],
                            [-1, -6, 1, -6], [6, -1, 6, 1]]},
    "agents": [{"id": 0, "waypoints": [[0, -5], [0, 0], [5, 0]]}],
    "maplets": {"kappa_max_deg": 90, "size_cap_bytes": 1000000},
    "odometry": {"noise_scale": 0}
  })");
  const auto r = run_scenario(parse_config(j));
  const auto& maplets = r.agents[0].maplets;
  ASSERT_GE(maplets.size(), 2u);
  const auto truth = ground_truth_maplet_origins(r.agents);
  for (std::size_t i = 1; i < maplets.size(); ++i) {
    const Pose2 o = truth.at({0, maplets[i].index});
    EXPECT_LT(o.translation().norm(), 0.5) << "maplet " << i;
  }
}

TEST(Scenario, SameSeedGivesIdenticalOutputTrees) {
  const auto cfg = load_config(kScenarios / "straight_hallway.json");
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  write_outputs(run_scenario(cfg), a);
  write_outputs(run_scenario(cfg), b);
  const auto ta = tree(a), tb = tree(b);
  EXPECT_FALSE(ta.empty());
  EXPECT_TRUE(ta == tb);

  auto other = cfg;
  other.seed += 1;
  const fs::path c = scratch("det_c");
  write_outputs(run_scenario(other), c);
  EXPECT_NE(slurp(a / "skeleton/agent0_pre.txt"), slurp(c / "skeleton/agent0_pre.txt"));
}

TEST(Scenario, OutputsRoundTripThroughTheirReaders) {
  const auto r = run_scenario(load_config(kScenarios / "straight_hallway.json"));
  const fs::path dir = scratch("roundtrip");
  write_outputs(r, dir);

  const Skeleton s = read_skeleton(dir / "skeleton/agent0_post.txt");
  ASSERT_EQ(s.poses.size(), r.post[0].poses.size());
  ASSERT_EQ(s.factors.size(), r.post[0].factors.size());
  for (const auto& [k, p] : r.post[0].poses) {
    EXPECT_EQ(s.poses.at(k).x, p.x);
    EXPECT_EQ(s.poses.at(k).y, p.y);
    EXPECT_EQ(s.poses.at(k).theta, p.theta);
  }

  const Maplet& m = r.agents[0].maplets.front();
  const PolygonMesh mesh = read_ply(dir / "maplets/agent0_maplet000.ply");
  const PolygonMesh expected = patch_mesh(m.planes);
  ASSERT_EQ(mesh.vertices.size(), expected.vertices.size());
  ASSERT_EQ(mesh.faces, expected.faces);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    EXPECT_EQ(mesh.vertices[i], expected.vertices[i]);
  }

  std::ifstream csv(dir / "bandwidth.csv");
  const auto rows = read_bandwidth_csv(csv);
  const auto want = bandwidth_rows(r.agents);
  ASSERT_EQ(rows.size(), want.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].agent, want[i].agent);
    EXPECT_EQ(rows[i].representation, want[i].representation);
    EXPECT_EQ(rows[i].count, want[i].count);
    EXPECT_EQ(rows[i].min_bytes, want[i].min_bytes);
    EXPECT_EQ(rows[i].max_bytes, want[i].max_bytes);
    EXPECT_EQ(rows[i].mean_bytes, want[i].mean_bytes);
  }

  std::ifstream gt(dir / "ground_truth.csv");
  const auto origins = read_ground_truth_csv(gt);
  const auto truth = ground_truth_maplet_origins(r.agents);
  ASSERT_EQ(origins.size(), truth.size());
  for (const auto& [k, p] : truth) {
    EXPECT_EQ(origins.at(k).x, p.x);
    EXPECT_EQ(origins.at(k).y, p.y);
    EXPECT_EQ(origins.at(k).theta, p.theta);
  }

  std::ifstream summary(dir / "summary.json");
  EXPECT_EQ(nlohmann::json::parse(summary), summary_json(r));
}

TEST(Report, EmptyRunHasNoRowsAndNoRatio) {
  const ScenarioResult empty;
  EXPECT_TRUE(bandwidth_rows(empty.agents).empty());
  const auto j = summary_json(empty);
  EXPECT_EQ(j["totals"]["compression_ratio"], "n/a");
  EXPECT_EQ(j["totals"]["protocol_ratio"], "n/a");
  std::ostringstream out;
  write_bandwidth_csv(out, {});
  EXPECT_EQ(out.str(), "agent,representation,count,min_bytes,max_bytes,mean_bytes\n");
}

TEST(Report, BandwidthRowsMatchTheMaplets) {
  const auto r = run_scenario(load_config(kScenarios / "desk.json"));
  const auto rows = bandwidth_rows(r.agents);
  ASSERT_EQ(rows.size(), 2u);
  const auto& maplet_row = rows[0].representation == "maplet" ? rows[0] : rows[1];
  const auto& cloud_row = rows[0].representation == "maplet" ? rows[1] : rows[0];
  EXPECT_EQ(cloud_row.representation, "point_cloud");
  EXPECT_EQ(maplet_row.count, r.agents[0].maplets.size());
  EXPECT_EQ(cloud_row.count, r.agents[0].samples.size());
  std::uint64_t lo = UINT64_MAX, hi = 0, sum = 0;
  for (const auto& m : r.agents[0].maplets) {
    const auto b = m.serialized_size();
    lo = std::min<std::uint64_t>(lo, b);
    hi = std::max<std::uint64_t>(hi, b);
    sum += b;
  }
  EXPECT_EQ(maplet_row.min_bytes, lo);
  EXPECT_EQ(maplet_row.max_bytes, hi);
  EXPECT_NEAR(maplet_row.mean_bytes, static_cast<double>(sum) / r.agents[0].maplets.size(), 1e-9);
}

TEST(Report, DeskScenarioCompressesAtLeastAHundredfold) {
  const auto r = run_scenario(load_config(kScenarios / "desk.json"));
  const auto j = summary_json(r);
  EXPECT_GE(j["totals"]["compression_ratio"].get<double>(), 100.0);
}

TEST(Scenario, NoCommsLeavesEveryAgentAlone) {
  RunOptions opts;
  opts.comms = false;
  auto cfg = load_config(kScenarios / "two_agent_loop.json");
  cfg.agents[0].trajectory.waypoints = {{0, -7}, {0, -4}};
  cfg.agents[1].trajectory.waypoints = {{0, 7}, {0, 4}};
  cfg.agents[1].trajectory.start_time = 0.0;
  const auto r = run_scenario(cfg, opts);
  EXPECT_EQ(r.ledger.total(), 0u);
  EXPECT_EQ(r.encounters, 0u);
  EXPECT_TRUE(r.closures.empty());
  for (std::size_t i = 0; i < r.stores.size(); ++i) {
    for (const auto& [k, p] : r.post[i].poses) EXPECT_EQ(k.agent, r.stores[i].id());
  }
}
