#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>

#include "lmpc/session.hpp"

namespace fs = std::filesystem;

namespace {

void print_report(const lmpc::SessionReport& rep) {
  std::printf("%4s %5s %6s %8s %8s %8s %10s %6s\n", "lap", "type", "steps",
              "seconds", "max|ay|", "data", "solve[ms]", "infeas");
  for (const auto& st : rep.laps) {
    std::printf("%4d %5s %6d %8.2f %8.3f %8d %10.3f %6d\n", st.lap,
                st.lmpc ? "lmpc" : "init", st.steps, st.seconds, st.max_abs_ay,
                st.data_points, st.mean_solve_ms, st.infeasible_steps);
  }
  if (rep.convergence_lap >= 0)
    std::printf("converged at lap %d\n", rep.convergence_lap);
  else
    std::printf("no convergence within the lap budget\n");
}

lmpc::SessionConfig config_next_to_session(const std::string& session_path,
                                           const std::string& config_override) {
  if (!config_override.empty()) return lmpc::SessionConfig::load(config_override);
  const fs::path echo = fs::path(session_path).parent_path() / "config_echo.json";
  if (!fs::exists(echo))
    throw std::runtime_error("no config_echo.json next to the session file; pass --config");
  return lmpc::SessionConfig::load(echo.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"learning MPC racing sessions"};
  app.require_subcommand(1);

  std::string config_path, out_dir, session_path, config_override;
  int laps = -1;
  long long seed = -1;

  auto* run = app.add_subcommand("run", "run a learning session");
  run->add_option("--config", config_path, "session config JSON")->required();
  run->add_option("--laps", laps, "override lap budget");
  run->add_option("--seed", seed, "override random seed");
  run->add_option("--out", out_dir, "override output directory");

  auto* replay = app.add_subcommand("replay", "re-run stored inputs through the plant");
  replay->add_option("--session", session_path, "session or trajectories JSONL")->required();
  replay->add_option("--config", config_override, "config JSON (default: config_echo.json next to the session)");

  auto* report = app.add_subcommand("report", "summarize a recorded session");
  report->add_option("--session", session_path, "session or trajectories JSONL")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      lmpc::SessionConfig cfg = lmpc::SessionConfig::load(config_path);
      if (laps > 0) cfg.lap_budget = laps;
      if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      lmpc::Session session(cfg);
      const lmpc::SessionReport rep = session.run();
      print_report(rep);
      if (!rep.completed) {
        std::fprintf(stderr, "session aborted: %s\n", rep.abort_reason.c_str());
        return 1;
      }
      if (!cfg.out_dir.empty())
        std::printf("outputs written to %s\n", cfg.out_dir.c_str());
      return 0;
    }

    if (replay->parsed()) {
      const auto records = lmpc::load_records(session_path);
      const lmpc::SessionConfig cfg = config_next_to_session(session_path, config_override);
      const lmpc::Track track(cfg.track);
      const lmpc::BicyclePlant plant(cfg.plant, cfg.input_bounds, track);
      const auto laps_out = lmpc::replay_records(
          records,
          [&](const lmpc::VehicleState& x, const lmpc::ControlInput& u, double dt) {
            return plant.step(x, u, dt);
          },
          cfg.dt);
      std::printf("%4s %6s %14s\n", "lap", "steps", "max deviation");
      for (const auto& rl : laps_out)
        std::printf("%4d %6d %14.3e\n", rl.lap, rl.steps, rl.max_state_dev);
      return 0;
    }

    if (report->parsed()) {
      const fs::path lap_times = fs::path(session_path).parent_path() / "lap_times.csv";
      if (fs::exists(lap_times)) {
        print_report(lmpc::load_report(lap_times.string()));
      } else {
        const auto records = lmpc::load_records(session_path);
        lmpc::SessionReport rep;
        for (std::size_t j = 0; j < records.size(); ++j) {
          lmpc::LapStats st;
          st.lap = static_cast<int>(j);
          st.steps = records[j].duration;
          st.seconds = 0.0;
          rep.laps.push_back(st);
        }
        rep.convergence_lap = lmpc::convergence_lap_index(rep.laps);
        print_report(rep);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
