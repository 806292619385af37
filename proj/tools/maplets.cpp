#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "maplets/config.hpp"
#include "maplets/scenario.hpp"

namespace {

int run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
        bool no_comms, bool emit_frames) {
  namespace fs = std::filesystem;
  maplets::ScenarioConfig cfg = maplets::load_config(config_path);
  if (seed) cfg.seed = *seed;

  maplets::RunOptions opts;
  if (no_comms) opts.comms = false;
  if (emit_frames) {
    const fs::path frames = fs::path(out_dir) / "frames";
    fs::create_directories(frames);
    opts.sink = [frames](std::uint16_t agent, std::size_t k, const maplets::DepthFrame& f) {
      std::ostringstream name;
      name << maplets::agent_tag(agent) << "_frame" << std::setw(4) << std::setfill('0') << k << ".depth";
      maplets::write_depth_frame(frames / name.str(), f);
    };
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto result = maplets::run_scenario(cfg, opts);
  maplets::write_outputs(result, out_dir);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto summary = maplets::summary_json(result);
  const auto& totals = summary["totals"];
  std::cout << "scenario " << cfg.name << " seed " << cfg.seed << (result.comms ? "" : " (no comms)") << '\n';
  for (const auto& a : summary["agents"]) {
    std::cout << "  agent " << a["id"] << ": " << a["frames"] << " frames, " << a["keyframes"]
              << " keyframes, " << a["maplets"] << " maplets\n";
  }
  std::cout << "  raw point clouds " << totals["raw_point_cloud_bytes"] << " B, maplets "
            << totals["maplet_bytes"] << " B, ratio " << totals["compression_ratio"] << '\n';
  std::cout << "  protocol " << totals["protocol_bytes"] << " B over " << result.encounters
            << " encounters, " << result.closures.size() << " inter-agent closure(s)\n";
  for (const auto& s : summary["skeletons"]) {
    std::cout << "  skeleton of agent " << s["agent"] << ": " << s["nodes"] << " nodes, chi2 "
              << s["chi2_initial"] << " -> " << s["chi2_final"] << ", max cross-agent error "
              << s["max_cross_agent_error_translation_m"] << " m\n";
  }
  std::printf("  wrote %s in %.2f s\n", out_dir.c_str(), seconds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent maplet mapping simulator"};
  app.require_subcommand(1);

  auto* run_cmd = app.add_subcommand("run", "Run a scenario and write its artifacts");
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  bool no_comms = false, emit_frames = false;
  run_cmd->add_option("config", config, "Scenario configuration (JSON)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--seed", seed, "Override the scenario seed");
  run_cmd->add_option("--out", out, "Output directory")->capture_default_str();
  run_cmd->add_flag("--no-comms", no_comms, "Run every agent alone");
  run_cmd->add_flag("--emit-frames", emit_frames, "Also write every rendered depth frame");

  CLI11_PARSE(app, argc, argv);

  try {
    return run(config, seed, out, no_comms, emit_frames);
  } catch (const maplets::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
