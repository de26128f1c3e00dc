#pragma once

#include <random>

#include "lmpc/session.hpp"
#include "lmpc/sys_id.hpp"
#include "lmpc/track.hpp"
#include "lmpc/types.hpp"

namespace lmpc::test {

// Stadium oval: two 4 m straights joined by half circles of radius 1 m.
inline TrackLayout oval_layout() {
  TrackLayout t;
  t.half_width = 0.4;
  t.segments = {{4.0, 0.0}, {M_PI, 1.0}, {4.0, 0.0}, {M_PI, 1.0}};
  return t;
}

// Single straight segment; useful wherever curvature should vanish.
inline TrackLayout straight_layout(double length = 20.0, double half_width = 0.5) {
  TrackLayout t;
  t.half_width = half_width;
  t.segments = {{length, 0.0}};
  return t;
}

inline SessionConfig oval_session_config(int laps, std::uint64_t seed) {
  SessionConfig cfg;
  cfg.track = oval_layout();
  cfg.lap_budget = laps;
  cfg.seed = seed;
  cfg.noise = NoiseConfig{0.0, 0.3, true};
  return cfg;
}

// Straight-track session for the exact-model regime: the plant below is
// affine in the velocity states and uses the discretized kinematics with
// zero curvature, so the learned ATV model is exact along closed-loop data.
inline SessionConfig toy_session_config(int laps) {
  SessionConfig cfg;
  cfg.track = straight_layout(12.0, 0.5);
  cfg.lap_budget = laps;
  cfg.lmpc.input_rate_weight = (Eigen::Matrix2d() << 1e-6, 0.0, 0.0, 1e-6).finished();
  cfg.lmpc.delta_rate_max = 1e9;
  cfg.lmpc.a_rate_max = 1e9;
  cfg.lmpc.ey_margin = 0.0;
  cfg.noise = NoiseConfig{0.0, 0.3, true};
  return cfg;
}

inline Session::PlantFn affine_toy_plant(const InputBounds& bounds) {
  return [bounds](const VehicleState& x, const ControlInput& u, double dt) {
    const ControlInput uc = bounds.clamp(u);
    VehicleState next = x;
    next.vx = x.vx + dt * uc.a;
    next.vy = 0.0;
    next.wz = 0.0;
    const Eigen::Vector3d pos = kinematic_step(x, dt, 0.0);
    next.epsi = pos(0);
    next.s = pos(1);
    next.ey = pos(2);
    return next;
  };
}

inline VehicleState random_on_track_state(std::mt19937& rng, const Track& track) {
  std::uniform_real_distribution<double> us(0.0, track.length());
  std::uniform_real_distribution<double> uy(-0.9 * track.half_width(),
                                            0.9 * track.half_width());
  std::uniform_real_distribution<double> upsi(-0.5, 0.5);
  std::uniform_real_distribution<double> uv(0.3, 3.5);
  std::uniform_real_distribution<double> uvy(-0.5, 0.5);
  std::uniform_real_distribution<double> uw(-2.0, 2.0);
  VehicleState x;
  x.vx = uv(rng);
  x.vy = uvy(rng);
  x.wz = uw(rng);
  x.epsi = upsi(rng);
  x.s = us(rng);
  x.ey = uy(rng);
  return x;
}

}  // namespace lmpc::test
