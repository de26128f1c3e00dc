#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmpc/types.hpp"

namespace lmpc {

// One stored lap: closed-loop states x_0..x_T, inputs u_0..u_T and integer
// cost-to-go T - t. Extended records append the successor lap's points with
// s shifted by the track length and the cost continuing into negative values,
// so queries near the finish line always have successors.
struct IterationRecord {
  std::vector<VehicleState> states;
  std::vector<ControlInput> inputs;
  int duration = 0;  // T: steps to reach s >= L
  std::vector<int> cost_to_go;

  std::size_t size() const { return states.size(); }
  // Indices that have a stored successor, usable as safe-set columns and
  // regression transitions.
  std::size_t usable() const { return states.empty() ? 0 : states.size() - 1; }
};

// A record in the learning window together with its lap index, as consumed by
// the safe-set and system-identification queries. Does not own the record.
struct WindowRecord {
  int iteration = 0;
  const IterationRecord* record = nullptr;
};

// Builds the record for a completed lap. The last state must have crossed the
// finish line (s >= track_length) and s must be strictly increasing.
inline IterationRecord finalize_iteration(std::vector<VehicleState> states,
                                          std::vector<ControlInput> inputs,
                                          double track_length) {
  if (states.size() < 2 || states.size() != inputs.size())
    throw std::invalid_argument("finalize_iteration: inconsistent lengths");
  if (states.back().s < track_length)
    throw std::runtime_error("finalize_iteration: iteration incomplete");
  for (std::size_t t = 0; t + 1 < states.size(); ++t)
    if (!(states[t].s < states[t + 1].s))
      throw std::runtime_error("finalize_iteration: s not strictly increasing");
  IterationRecord rec;
  rec.duration = static_cast<int>(states.size()) - 1;
  rec.states = std::move(states);
  rec.inputs = std::move(inputs);
  rec.cost_to_go.resize(rec.states.size());
  for (std::size_t t = 0; t < rec.states.size(); ++t)
    rec.cost_to_go[t] = rec.duration - static_cast<int>(t);
  return rec;
}

// Concatenates lap j with (a possibly partial prefix of) lap j+1. The
// appended states get s + L so s stays monotone, and costs continue the
// T - t formula past the finish line. next_states[0] is the same physical
// point as lap.states.back() and is skipped.
inline IterationRecord extend_record(const IterationRecord& lap,
                                     const std::vector<VehicleState>& next_states,
                                     const std::vector<ControlInput>& next_inputs,
                                     double track_length) {
  if (next_states.empty() || next_states.size() != next_inputs.size())
    throw std::runtime_error("extend_record: successor lap missing");
  IterationRecord ext = lap;
  for (std::size_t t = 1; t < next_states.size(); ++t) {
    VehicleState x = next_states[t];
    x.s += track_length;
    ext.states.push_back(x);
    ext.inputs.push_back(next_inputs[t]);
    // global time index is T + t, so T - (T + t) = -t
    ext.cost_to_go.push_back(-static_cast<int>(t));
  }
  return ext;
}

inline IterationRecord extend_record(const IterationRecord& lap,
                                     const IterationRecord& next,
                                     double track_length) {
  return extend_record(lap, next.states, next.inputs, track_length);
}

namespace detail {

inline nlohmann::json record_to_json(const IterationRecord& rec) {
  nlohmann::json states = nlohmann::json::array();
  for (const auto& x : rec.states)
    states.push_back({x.vx, x.vy, x.wz, x.epsi, x.s, x.ey});
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& u : rec.inputs) inputs.push_back({u.delta, u.a});
  return {{"type", "iteration"},
          {"duration", rec.duration},
          {"states", states},
          {"inputs", inputs},
          {"cost_to_go", rec.cost_to_go}};
}

inline IterationRecord record_from_json(const nlohmann::json& j) {
  IterationRecord rec;
  rec.duration = j.at("duration").get<int>();
  for (const auto& xs : j.at("states")) {
    if (xs.size() != 6) throw std::runtime_error("state must have 6 entries");
    rec.states.push_back(VehicleState{xs[0], xs[1], xs[2], xs[3], xs[4], xs[5]});
  }
  for (const auto& us : j.at("inputs")) {
    if (us.size() != 2) throw std::runtime_error("input must have 2 entries");
    rec.inputs.push_back(ControlInput{us[0], us[1]});
  }
  rec.cost_to_go = j.at("cost_to_go").get<std::vector<int>>();
  if (rec.states.size() != rec.inputs.size() ||
      rec.states.size() != rec.cost_to_go.size())
    throw std::runtime_error("inconsistent record lengths");
  return rec;
}

}  // namespace detail

// JSON-lines trajectory log, one iteration per line. Lines with a different
// "type" field (per-step diagnostics) are preserved by the session writer and
// skipped here.
inline void save_records(const std::vector<IterationRecord>& records,
                         const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_records: cannot open " + path);
  for (const auto& rec : records) out << detail::record_to_json(rec) << "\n";
}

inline std::vector<IterationRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_records: cannot open " + path);
  std::vector<IterationRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("load_records: parse error at " + path + ":" +
                               std::to_string(lineno) + ": " + e.what());
    }
    if (j.value("type", "iteration") != "iteration") continue;
    try {
      records.push_back(detail::record_from_json(j));
    } catch (const std::exception& e) {
      throw std::runtime_error("load_records: bad record at " + path + ":" +
                               std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace lmpc
