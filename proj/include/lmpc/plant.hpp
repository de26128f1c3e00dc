#pragma once

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "lmpc/track.hpp"
#include "lmpc/types.hpp"

namespace lmpc {

constexpr double kGravity = 9.81;

// Dynamic bicycle parameters. Defaults are 1/10-scale values and are
// non-normative; sessions load them from config.
struct PlantParams {
  double mass = 1.98;      // [kg]
  double inertia_z = 0.03; // yaw inertia [kg m^2]
  double l_f = 0.125;      // CoG to front axle [m]
  double l_r = 0.125;      // CoG to rear axle [m]
  double c_f = 60.0;       // front cornering stiffness [N/rad]
  double c_r = 60.0;       // rear cornering stiffness [N/rad]
  double mu = 1.0;         // friction coefficient
  double drag_coeff = 0.05;// linear drag [1/s]
  double vx_floor = 0.1;   // slip angles are undefined at standstill [m/s]
  int substeps = 10;       // explicit-Euler substeps per control step

  void validate() const {
    if (!(mass > 0.0 && inertia_z > 0.0 && l_f > 0.0 && l_r > 0.0 && c_f > 0.0 &&
          c_r > 0.0 && drag_coeff >= 0.0 && vx_floor > 0.0 && substeps >= 1))
      throw std::invalid_argument("plant: parameters must be positive");
    if (!(mu > 0.0 && mu <= 1.5))
      throw std::invalid_argument("plant: mu must be in (0, 1.5]");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PlantParams, mass, inertia_z, l_f,
                                                l_r, c_f, c_r, mu, drag_coeff,
                                                vx_floor, substeps)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(InputBounds, delta_min, delta_max,
                                                a_min, a_max)

// Ground-truth simulator: linear tire forces saturated at mu*m*g per axle,
// yaw-moment balance, and the curvilinear kinematics in continuous form.
// The controller never sees these equations.
class BicyclePlant {
 public:
  BicyclePlant(PlantParams params, InputBounds bounds, const Track& track)
      : p_(params), bounds_(bounds), track_(&track) {
    p_.validate();
  }

  const PlantParams& params() const { return p_; }
  const InputBounds& bounds() const { return bounds_; }

  VehicleState step(const VehicleState& x, const ControlInput& u, double dt) const {
    if (!x.all_finite()) throw std::invalid_argument("plant: invalid state");
    const ControlInput uc = bounds_.clamp(u);
    VehicleState z = x;
    z.vx = std::max(z.vx, p_.vx_floor);
    const double h = dt / p_.substeps;
    for (int i = 0; i < p_.substeps; ++i) {
      const Vec6 dz = derivatives(z, uc);
      Vec6 v = z.to_vec() + h * dz;
      z = VehicleState::from_vec(v);
      z.vx = std::max(z.vx, p_.vx_floor);
    }
    return z;
  }

  // v_y' + v_x*w_z from the force balance; used for reporting only.
  double lateral_acceleration(const VehicleState& x, const ControlInput& u) const {
    const ControlInput uc = bounds_.clamp(u);
    double fyf, fyr;
    tire_forces(x, uc, fyf, fyr);
    return (fyf * std::cos(uc.delta) + fyr) / p_.mass;
  }

  Vec6 derivatives(const VehicleState& x, const ControlInput& u) const {
    double fyf, fyr;
    tire_forces(x, u, fyf, fyr);
    const double cd = std::cos(u.delta), sd = std::sin(u.delta);
    const double kappa = track_->curvature(x.s);
    const double den = 1.0 - kappa * x.ey;
    const double vproj = x.vx * std::cos(x.epsi) - x.vy * std::sin(x.epsi);
    Vec6 d;
    d(0) = u.a + x.vy * x.wz - fyf * sd / p_.mass - p_.drag_coeff * x.vx;
    d(1) = (fyf * cd + fyr) / p_.mass - x.vx * x.wz;
    d(2) = (p_.l_f * fyf * cd - p_.l_r * fyr) / p_.inertia_z;
    d(3) = x.wz - kappa * vproj / den;
    d(4) = vproj / den;
    d(5) = x.vx * std::sin(x.epsi) + x.vy * std::cos(x.epsi);
    return d;
  }

 private:
  void tire_forces(const VehicleState& x, const ControlInput& u, double& fyf,
                   double& fyr) const {
    const double vx = std::max(x.vx, p_.vx_floor);
    const double alpha_f = std::atan((x.vy + p_.l_f * x.wz) / vx) - u.delta;
    const double alpha_r = std::atan((x.vy - p_.l_r * x.wz) / vx);
    const double fzf = p_.mass * kGravity * p_.l_r / (p_.l_f + p_.l_r);
    const double fzr = p_.mass * kGravity * p_.l_f / (p_.l_f + p_.l_r);
    fyf = std::clamp(-p_.c_f * alpha_f, -p_.mu * fzf, p_.mu * fzf);
    fyr = std::clamp(-p_.c_r * alpha_r, -p_.mu * fzr, p_.mu * fzr);
  }

  PlantParams p_;
  InputBounds bounds_;
  const Track* track_;
};

}  // namespace lmpc
