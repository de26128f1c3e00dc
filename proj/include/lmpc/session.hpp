#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmpc/controller.hpp"
#include "lmpc/plant.hpp"
#include "lmpc/track.hpp"
#include "lmpc/trajectory_store.hpp"

namespace lmpc {

struct PathFollowConfig {
  double k_ey = 4.0;    // steering gain on lateral error
  double k_epsi = 1.5;  // steering gain on heading error
  double k_v = 2.0;     // longitudinal speed gain
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PathFollowConfig, k_ey, k_epsi, k_v)

// Zero-mean uniform actuation noise, off by default. With init_only the
// dither is applied during the path-following laps and switched off for the
// LMPC laps; the initialization data then spans a full-rank feature cloud
// even though the commanded speed is constant.
struct NoiseConfig {
  double delta_amp = 0.0;
  double a_amp = 0.0;
  bool init_only = false;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseConfig, delta_amp, a_amp,
                                                init_only)

inline void to_json(nlohmann::json& j, const KernelConfig& k) {
  j = {{"bandwidth", k.bandwidth},
       {"neighbors", k.neighbors},
       {"scaling", std::vector<double>(k.scaling.data(), k.scaling.data() + 6)},
       {"ridge", k.ridge}};
}

inline void from_json(const nlohmann::json& j, KernelConfig& k) {
  k.bandwidth = j.value("bandwidth", k.bandwidth);
  k.neighbors = j.value("neighbors", k.neighbors);
  k.ridge = j.value("ridge", k.ridge);
  if (j.contains("scaling")) {
    const auto v = j.at("scaling").get<std::vector<double>>();
    if (v.size() != 6) throw std::invalid_argument("kernel scaling must have 6 entries");
    for (int i = 0; i < 6; ++i) k.scaling(i) = v[i];
  }
}

inline void to_json(nlohmann::json& j, const LmpcConfig& c) {
  j = {{"horizon", c.horizon},
       {"knn", c.knn},
       {"window_laps", c.window_laps},
       {"knn_metric", std::vector<double>(c.knn_metric.data(), c.knn_metric.data() + 6)},
       {"kernel", c.kernel},
       {"input_rate_weight", std::vector<double>{c.input_rate_weight(0, 0),
                                                 c.input_rate_weight(1, 1)}},
       {"delta_rate_max", c.delta_rate_max},
       {"a_rate_max", c.a_rate_max},
       {"slack_weight", c.slack_weight},
       {"ey_margin", c.ey_margin}};
}

inline void from_json(const nlohmann::json& j, LmpcConfig& c) {
  c.horizon = j.value("horizon", c.horizon);
  c.knn = j.value("knn", c.knn);
  c.window_laps = j.value("window_laps", c.window_laps);
  if (j.contains("knn_metric")) {
    const auto v = j.at("knn_metric").get<std::vector<double>>();
    if (v.size() != 6) throw std::invalid_argument("knn_metric must have 6 entries");
    for (int i = 0; i < 6; ++i) c.knn_metric(i) = v[i];
  }
  if (j.contains("kernel")) c.kernel = j.at("kernel").get<KernelConfig>();
  if (j.contains("input_rate_weight")) {
    const auto v = j.at("input_rate_weight").get<std::vector<double>>();
    if (v.size() != 2) throw std::invalid_argument("input_rate_weight must have 2 entries");
    c.input_rate_weight.setZero();
    c.input_rate_weight(0, 0) = v[0];
    c.input_rate_weight(1, 1) = v[1];
  }
  c.delta_rate_max = j.value("delta_rate_max", c.delta_rate_max);
  c.a_rate_max = j.value("a_rate_max", c.a_rate_max);
  c.slack_weight = j.value("slack_weight", c.slack_weight);
  c.ey_margin = j.value("ey_margin", c.ey_margin);
}

struct SessionConfig {
  TrackLayout track;
  std::string track_file;  // provenance only; the layout above is authoritative
  PlantParams plant;
  InputBounds input_bounds;
  LmpcConfig lmpc;
  int lap_budget = 40;
  int init_laps = 2;
  double init_speed = 1.2;  // path-following speed [m/s]
  double dt = 0.1;
  std::uint64_t seed = 0;
  std::string out_dir;
  PathFollowConfig path_follow;
  NoiseConfig noise;
  int max_lap_steps = 20000;

  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("session: dt must be > 0");
    if (lap_budget < init_laps + 1)
      throw std::invalid_argument("session: lap budget must exceed init laps");
    if (init_laps < 1) throw std::invalid_argument("session: need at least one init lap");
    if (!(init_speed > 0.0)) throw std::invalid_argument("session: init speed must be > 0");
  }

  nlohmann::json to_json() const {
    nlohmann::json jt = nlohmann::json::array();
    for (const auto& seg : track.segments)
      jt.push_back({{"length", seg.length}, {"curvature", seg.curvature}});
    return {{"track", {{"half_width", track.half_width}, {"segments", jt}}},
            {"track_file", track_file},
            {"plant", plant},
            {"input_bounds", input_bounds},
            {"lmpc", lmpc},
            {"lap_budget", lap_budget},
            {"init_laps", init_laps},
            {"init_speed", init_speed},
            {"dt", dt},
            {"seed", seed},
            {"out_dir", out_dir},
            {"path_follow", path_follow},
            {"noise", noise}};
  }

  // base_dir resolves a relative track file reference.
  static SessionConfig from_json(const nlohmann::json& j,
                                 const std::filesystem::path& base_dir = {}) {
    SessionConfig cfg;
    if (j.contains("track")) {
      const auto& t = j.at("track");
      if (t.is_string()) {
        cfg.track_file = t.get<std::string>();
        std::filesystem::path p = cfg.track_file;
        if (p.is_relative()) p = base_dir / p;
        cfg.track = Track::load(p.string()).layout();
      } else {
        cfg.track.half_width = t.at("half_width").get<double>();
        for (const auto& seg : t.at("segments"))
          cfg.track.segments.push_back(
              {seg.at("length").get<double>(), seg.at("curvature").get<double>()});
      }
    }
    if (j.contains("plant")) cfg.plant = j.at("plant").get<PlantParams>();
    if (j.contains("input_bounds"))
      cfg.input_bounds = j.at("input_bounds").get<InputBounds>();
    if (j.contains("lmpc")) cfg.lmpc = j.at("lmpc").get<LmpcConfig>();
    cfg.lap_budget = j.value("lap_budget", cfg.lap_budget);
    cfg.init_laps = j.value("init_laps", cfg.init_laps);
    cfg.init_speed = j.value("init_speed", cfg.init_speed);
    cfg.dt = j.value("dt", cfg.dt);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (j.contains("path_follow"))
      cfg.path_follow = j.at("path_follow").get<PathFollowConfig>();
    if (j.contains("noise")) cfg.noise = j.at("noise").get<NoiseConfig>();
    cfg.max_lap_steps = j.value("max_lap_steps", cfg.max_lap_steps);
    return cfg;
  }

  static SessionConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("session: cannot open config " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("session: config parse error in " + path + ": " +
                               e.what());
    }
    return from_json(j, std::filesystem::path(path).parent_path());
  }
};

struct LapStats {
  int lap = 0;
  bool lmpc = false;
  int steps = 0;
  double seconds = 0.0;
  double max_abs_ay = 0.0;
  int data_points = 0;
  double mean_solve_ms = 0.0;
  double max_solve_ms = 0.0;
  int infeasible_steps = 0;
  double model_error = 0.0;  // mean one-step velocity prediction error
};

struct SessionReport {
  std::vector<LapStats> laps;
  int convergence_lap = -1;
  double dt = 0.1;
  bool completed = false;
  std::string abort_reason;
};

// First lap index from which the lap time stays within 1 step over 5
// consecutive laps; -1 if never.
inline int convergence_lap_index(const std::vector<LapStats>& laps) {
  constexpr int kWindow = 5;
  for (std::size_t c = 0; c + kWindow <= laps.size(); ++c) {
    if (!laps[c].lmpc) continue;
    int lo = laps[c].steps, hi = laps[c].steps;
    for (std::size_t i = c; i < c + kWindow; ++i) {
      lo = std::min(lo, laps[i].steps);
      hi = std::max(hi, laps[i].steps);
    }
    if (hi - lo <= 1) return laps[c].lap;
  }
  return -1;
}

namespace detail {

inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Per-step controller diagnostics, written to the session log (deterministic
// fields) and timing.csv (wall-clock solve times).
struct StepDiagnostics {
  int lap = 0;
  int t = 0;
  double solve_ms = 0.0;
  std::string status;
  double objective = 0.0;
  int lambda_nnz = 0;
  double terminal_residual = 0.0;
  double simplex_residual = 0.0;
  double kkt_stationarity = 0.0;
  double kkt_eq = 0.0;
  double kkt_comp = 0.0;
  bool fallback = false;
};

// Full learning session: path-following initialization, LMPC lap loop with
// two-lap extended data windows, metric collection, and output files.
class Session {
 public:
  using PlantFn =
      std::function<VehicleState(const VehicleState&, const ControlInput&, double)>;
  using AccelFn = std::function<double(const VehicleState&, const ControlInput&)>;

  explicit Session(SessionConfig cfg)
      : Session(std::move(cfg), PlantFn{}, AccelFn{}) {}

  // plant/accel overrides let tests drive the loop with a synthetic plant.
  Session(SessionConfig cfg, PlantFn plant, AccelFn accel)
      : cfg_(std::move(cfg)), track_(cfg_.track), rng_(cfg_.seed) {
    cfg_.validate();
    cfg_.lmpc.dt = cfg_.dt;
    cfg_.lmpc.input_bounds = cfg_.input_bounds;
    if (!plant) {
      bicycle_.emplace(cfg_.plant, cfg_.input_bounds, track_);
      plant_ = [this](const VehicleState& x, const ControlInput& u, double dt) {
        return bicycle_->step(x, u, dt);
      };
      accel_ = [this](const VehicleState& x, const ControlInput& u) {
        return bicycle_->lateral_acceleration(x, u);
      };
    } else {
      plant_ = std::move(plant);
      accel_ = accel ? std::move(accel)
                     : AccelFn([](const VehicleState&, const ControlInput&) {
                         return 0.0;
                       });
    }
    controller_.emplace(track_, cfg_.lmpc);
    state_ = VehicleState{cfg_.init_speed, 0.0, 0.0, 0.0, 0.0, 0.0};
    report_.dt = cfg_.dt;
  }

  const Track& track() const { return track_; }
  const SessionConfig& config() const { return cfg_; }
  const std::vector<IterationRecord>& records() const { return records_; }
  const std::vector<StepDiagnostics>& diagnostics() const { return diag_; }
  const SessionReport& report() const { return report_; }

  // Resume support: laps recorded by an earlier session count toward the
  // budget and seed the learning window.
  void preload_records(std::vector<IterationRecord> recs) {
    records_ = std::move(recs);
    for (std::size_t i = 0; i < records_.size(); ++i) {
      LapStats st;
      st.lap = static_cast<int>(i);
      st.lmpc = static_cast<int>(i) >= cfg_.init_laps;
      st.steps = records_[i].duration;
      st.seconds = st.steps * cfg_.dt;
      report_.laps.push_back(st);
    }
  }

  bool run_initialization() {
    while (static_cast<int>(records_.size()) < cfg_.init_laps)
      if (!run_lap(false)) return false;
    return true;
  }

  bool run_lmpc_lap() { return run_lap(true); }

  SessionReport run() {
    if (run_initialization()) {
      while (static_cast<int>(records_.size()) < cfg_.lap_budget)
        if (!run_lmpc_lap()) break;
    }
    report_.completed = static_cast<int>(records_.size()) == cfg_.lap_budget &&
                        report_.abort_reason.empty();
    report_.convergence_lap = convergence_lap_index(report_.laps);
    if (!cfg_.out_dir.empty()) emit_outputs(cfg_.out_dir);
    return report_;
  }

  void emit_outputs(const std::string& dir) const;

 private:
  ControlInput path_follow(const VehicleState& x) const {
    return cfg_.input_bounds.clamp(
        ControlInput{-cfg_.path_follow.k_ey * x.ey - cfg_.path_follow.k_epsi * x.epsi,
                     cfg_.path_follow.k_v * (cfg_.init_speed - x.vx)});
  }

  bool run_lap(bool lmpc) {
    const int j = static_cast<int>(records_.size());
    const double L = track_.length();
    std::vector<VehicleState> xs{state_};
    std::vector<ControlInput> us;

    std::vector<IterationRecord> fixed_ext;
    const IterationRecord* prev = nullptr;
    if (lmpc) {
      prev = &records_.back();
      const int lo = std::max(0, j - cfg_.lmpc.window_laps);
      for (int w = lo; w + 1 < j; ++w)
        fixed_ext.push_back(extend_record(records_[w], records_[w + 1], L));
      controller_->begin_lap(*prev);
    }

    LapStats stats;
    stats.lap = j;
    stats.lmpc = lmpc;
    std::vector<double> lap_ay;
    std::vector<double> lap_solve_ms;
    double solve_ms_sum = 0.0;
    double model_err_sum = 0.0;
    int model_err_count = 0;
    std::optional<VehicleState> predicted_next;

    for (int t = 0;; ++t) {
      if (t >= cfg_.max_lap_steps) {
        report_.abort_reason = "lap " + std::to_string(j) + " did not complete";
        return false;
      }
      ControlInput u;
      if (lmpc) {
        IterationRecord ext_last = *prev;
        if (t > 0) {
          std::vector<ControlInput> us_pad = us;
          us_pad.push_back(ControlInput{});
          ext_last = extend_record(*prev, xs, us_pad, L);
        }
        std::vector<WindowRecord> window;
        const int lo = std::max(0, j - cfg_.lmpc.window_laps);
        for (std::size_t i = 0; i < fixed_ext.size(); ++i)
          window.push_back({lo + static_cast<int>(i), &fixed_ext[i]});
        window.push_back({j - 1, &ext_last});

        auto res = controller_->solve_step(state_, window);
        u = res.input;
        StepDiagnostics d;
        d.lap = j;
        d.t = t;
        d.fallback = res.fallback;
        if (res.solution) {
          const FtocpSolution& fs = *res.solution;
          d.solve_ms = fs.solve_time * 1e3;
          d.status = to_string(fs.status);
          d.objective = fs.objective;
          d.terminal_residual = fs.terminal_residual;
          d.simplex_residual = fs.simplex_residual;
          d.kkt_stationarity = fs.stationarity_res;
          d.kkt_eq = fs.eq_res;
          d.kkt_comp = fs.comp_res;
          for (Eigen::Index i = 0; i < fs.lambda.size(); ++i)
            if (fs.lambda(i) > 1e-6) ++d.lambda_nnz;
          if (!res.fallback && !fs.states.empty()) predicted_next = fs.states[1];
        } else {
          d.status = "skipped";
        }
        if (res.fallback) {
          ++stats.infeasible_steps;
          predicted_next.reset();
        }
        lap_solve_ms.push_back(d.solve_ms);
        solve_ms_sum += d.solve_ms;
        stats.max_solve_ms = std::max(stats.max_solve_ms, d.solve_ms);
        diag_.push_back(std::move(d));
      } else {
        u = path_follow(state_);
      }

      if (t == 0 && patch_pending_ && !records_.empty()) {
        records_.back().inputs.back() = u;
        patch_pending_ = false;
      }

      const bool noise_on = (cfg_.noise.delta_amp > 0.0 || cfg_.noise.a_amp > 0.0) &&
                            (!cfg_.noise.init_only || !lmpc);
      if (noise_on) {
        std::uniform_real_distribution<double> dd(-cfg_.noise.delta_amp,
                                                  cfg_.noise.delta_amp);
        std::uniform_real_distribution<double> da(-cfg_.noise.a_amp, cfg_.noise.a_amp);
        u.delta += dd(rng_);
        u.a += da(rng_);
        u = cfg_.input_bounds.clamp(u);
      }
      us.push_back(u);

      const double ay = accel_(state_, u);
      lap_ay.push_back(ay);
      stats.max_abs_ay = std::max(stats.max_abs_ay, std::abs(ay));

      const VehicleState next = plant_(state_, u, cfg_.dt);
      if (predicted_next) {
        const double dv = std::hypot(predicted_next->vx - next.vx,
                                     predicted_next->vy - next.vy,
                                     predicted_next->wz - next.wz);
        model_err_sum += dv;
        ++model_err_count;
        predicted_next.reset();
      }
      xs.push_back(next);

      const double departure = lmpc ? track_.half_width() + 1e-3 : track_.half_width();
      if (std::abs(next.ey) > departure) {
        report_.abort_reason = "track departure at lap " + std::to_string(j) +
                               " step " + std::to_string(t);
        return false;
      }
      state_ = next;

      if (next.s >= L) {
        state_.s -= L;
        us.push_back(us.back());  // placeholder, patched by the next lap's u_0
        records_.push_back(finalize_iteration(std::move(xs), std::move(us), L));
        patch_pending_ = true;

        stats.steps = records_.back().duration;
        stats.seconds = stats.steps * cfg_.dt;
        if (lmpc) {
          stats.mean_solve_ms = solve_ms_sum / std::max(1, stats.steps);
          stats.model_error =
              model_err_count > 0 ? model_err_sum / model_err_count : 0.0;
          const int lo = std::max(0, j - cfg_.lmpc.window_laps);
          for (int w = lo; w < j; ++w)
            stats.data_points += static_cast<int>(records_[w].size() +
                                                  records_[w + 1].size() - 1);
        }
        report_.laps.push_back(stats);
        accel_trace_.push_back(std::move(lap_ay));
        timing_trace_.push_back(std::move(lap_solve_ms));
        return true;
      }
    }
  }

  SessionConfig cfg_;
  Track track_;
  std::optional<BicyclePlant> bicycle_;
  PlantFn plant_;
  AccelFn accel_;
  std::optional<Controller> controller_;
  std::mt19937_64 rng_;

  VehicleState state_;
  std::vector<IterationRecord> records_;
  std::vector<StepDiagnostics> diag_;
  std::vector<std::vector<double>> accel_trace_;
  std::vector<std::vector<double>> timing_trace_;
  bool patch_pending_ = false;
  SessionReport report_;
};

inline void Session::emit_outputs(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base(dir);

  save_records(records_, (base / "trajectories.jsonl").string());

  {
    std::ofstream out(base / "session.jsonl");
    std::size_t d = 0;
    for (std::size_t j = 0; j < records_.size(); ++j) {
      out << detail::record_to_json(records_[j]) << "\n";
      nlohmann::json steps = nlohmann::json::array();
      for (; d < diag_.size() && diag_[d].lap == static_cast<int>(j); ++d) {
        const auto& sd = diag_[d];
        steps.push_back({{"t", sd.t},
                         {"status", sd.status},
                         {"objective", sd.objective},
                         {"lambda_nnz", sd.lambda_nnz},
                         {"terminal_residual", sd.terminal_residual},
                         {"simplex_residual", sd.simplex_residual},
                         {"kkt", {sd.kkt_stationarity, sd.kkt_eq, sd.kkt_comp}},
                         {"fallback", sd.fallback}});
      }
      if (!steps.empty())
        out << nlohmann::json{{"type", "diagnostics"},
                              {"lap", j},
                              {"steps", steps}} << "\n";
    }
  }

  {
    std::ofstream out(base / "lap_times.csv");
    out << "lap,type,steps,seconds,max_abs_ay,data_points,mean_solve_ms,"
           "max_solve_ms,infeasible_steps,model_error\n";
    for (const auto& st : report_.laps) {
      out << st.lap << ',' << (st.lmpc ? "lmpc" : "init") << ',' << st.steps << ','
          << detail::fmt_full(st.seconds) << ',' << detail::fmt_full(st.max_abs_ay)
          << ',' << st.data_points << ',' << detail::fmt_full(st.mean_solve_ms)
          << ',' << detail::fmt_full(st.max_solve_ms) << ',' << st.infeasible_steps
          << ',' << detail::fmt_full(st.model_error) << "\n";
    }
  }

  {
    std::ofstream out(base / "accel.csv");
    out << "lap,t,ay\n";
    for (std::size_t j = 0; j < accel_trace_.size(); ++j)
      for (std::size_t t = 0; t < accel_trace_[j].size(); ++t)
        out << j << ',' << t << ',' << detail::fmt_full(accel_trace_[j][t]) << "\n";
  }

  {
    std::ofstream out(base / "timing.csv");
    out << "lap,t,solve_ms\n";
    for (std::size_t j = 0; j < timing_trace_.size(); ++j)
      for (std::size_t t = 0; t < timing_trace_[j].size(); ++t)
        if (!timing_trace_[j].empty())
          out << j << ',' << t << ',' << detail::fmt_full(timing_trace_[j][t]) << "\n";
  }

  {
    std::ofstream out(base / "config_echo.json");
    out << cfg_.to_json().dump(2) << "\n";
  }
}

// Rebuilds a SessionReport from an emitted lap_times.csv.
inline SessionReport load_report(const std::string& lap_times_csv) {
  std::ifstream in(lap_times_csv);
  if (!in) throw std::runtime_error("report: cannot open " + lap_times_csv);
  SessionReport rep;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    LapStats st;
    auto next = [&]() {
      if (!std::getline(ss, field, ','))
        throw std::runtime_error("report: malformed row in " + lap_times_csv);
      return field;
    };
    st.lap = std::stoi(next());
    st.lmpc = next() == "lmpc";
    st.steps = std::stoi(next());
    st.seconds = std::stod(next());
    st.max_abs_ay = std::stod(next());
    st.data_points = std::stoi(next());
    st.mean_solve_ms = std::stod(next());
    st.max_solve_ms = std::stod(next());
    st.infeasible_steps = std::stoi(next());
    st.model_error = std::stod(next());
    rep.laps.push_back(st);
  }
  rep.convergence_lap = convergence_lap_index(rep.laps);
  if (rep.laps.size() > 1)
    rep.dt = rep.laps[0].steps > 0 ? rep.laps[0].seconds / rep.laps[0].steps : 0.1;
  rep.completed = true;
  return rep;
}

struct ReplayLap {
  int lap = 0;
  int steps = 0;
  double max_state_dev = 0.0;  // max |replayed - stored| over all states
};

// Re-runs each stored lap's inputs through a plant from the stored initial
// state; a faithful log replays to numerical precision.
inline std::vector<ReplayLap> replay_records(
    const std::vector<IterationRecord>& records, const Session::PlantFn& plant,
    double dt) {
  std::vector<ReplayLap> out;
  for (std::size_t j = 0; j < records.size(); ++j) {
    const auto& rec = records[j];
    ReplayLap rl;
    rl.lap = static_cast<int>(j);
    rl.steps = rec.duration;
    VehicleState x = rec.states.front();
    for (int t = 0; t < rec.duration; ++t) {
      x = plant(x, rec.inputs[t], dt);
      rl.max_state_dev = std::max(
          rl.max_state_dev,
          (x.to_vec() - rec.states[t + 1].to_vec()).cwiseAbs().maxCoeff());
    }
    out.push_back(rl);
  }
  return out;
}

}  // namespace lmpc
