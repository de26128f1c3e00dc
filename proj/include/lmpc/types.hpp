#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace lmpc {

using Vec2 = Eigen::Vector2d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat62 = Eigen::Matrix<double, 6, 2>;

// State in the curvilinear frame, ordered [v_x, v_y, w_z, e_psi, s, e_y].
// s is the arc-length progress within the current lap; it is not wrapped,
// so values beyond the track length mark states past the finish line.
struct VehicleState {
  double vx = 0.0;    // longitudinal velocity [m/s]
  double vy = 0.0;    // lateral velocity [m/s]
  double wz = 0.0;    // yaw rate [rad/s]
  double epsi = 0.0;  // heading error [rad]
  double s = 0.0;     // arc-length progress [m]
  double ey = 0.0;    // lateral error [m]

  Vec6 to_vec() const {
    Vec6 v;
    v << vx, vy, wz, epsi, s, ey;
    return v;
  }

  static VehicleState from_vec(const Vec6& v) {
    return VehicleState{v(0), v(1), v(2), v(3), v(4), v(5)};
  }

  bool all_finite() const {
    return std::isfinite(vx) && std::isfinite(vy) && std::isfinite(wz) &&
           std::isfinite(epsi) && std::isfinite(s) && std::isfinite(ey);
  }
};

// Input vector u = [delta, a]: steering angle and acceleration command.
struct ControlInput {
  double delta = 0.0;  // steering [rad]
  double a = 0.0;      // acceleration [m/s^2]

  Vec2 to_vec() const { return Vec2(delta, a); }

  static ControlInput from_vec(const Vec2& v) { return ControlInput{v(0), v(1)}; }
};

struct InputBounds {
  double delta_min = -0.6;
  double delta_max = 0.6;
  double a_min = -3.0;
  double a_max = 3.0;

  ControlInput clamp(const ControlInput& u) const {
    return ControlInput{std::clamp(u.delta, delta_min, delta_max),
                        std::clamp(u.a, a_min, a_max)};
  }
};

inline double wrap_to_pi(double angle) {
  double w = std::remainder(angle, 2.0 * M_PI);
  if (w <= -M_PI) w += 2.0 * M_PI;  // remainder returns (-pi, pi]; keep that convention
  return w;
}

}  // namespace lmpc
