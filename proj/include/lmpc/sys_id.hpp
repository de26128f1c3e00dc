#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "lmpc/track.hpp"
#include "lmpc/trajectory_store.hpp"
#include "lmpc/types.hpp"

namespace lmpc {

using RegressorVector = Eigen::Matrix<double, 5, 1>;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Mat5 = Eigen::Matrix<double, 5, 5>;

enum class VelComponent { vx, vy, wz };

struct KernelConfig {
  double bandwidth = 10.0;  // h; the kernel argument is ||.||_Q^2 / h
  int neighbors = 80;       // P
  Vec6 scaling = (Vec6() << 0.1, 1.0, 1.0, 0.0, 0.0, 0.0).finished();  // Q diagonal
  double ridge = 1e-9;

  void validate() const {
    if (!(bandwidth > 0.0)) throw std::invalid_argument("sys_id: bandwidth must be > 0");
    if (neighbors < 6) throw std::invalid_argument("sys_id: need at least 6 neighbors");
    if (ridge < 0.0) throw std::invalid_argument("sys_id: ridge must be >= 0");
  }
};

inline double epanechnikov(double u) {
  return std::abs(u) < 1.0 ? 0.75 * (1.0 - u * u) : 0.0;
}

namespace detail {

struct Neighbor {
  double dist2;  // squared Q-weighted distance
  int window_pos;
  int time;
};

// P nearest stored transitions to x under the Q metric, ties broken by
// (iteration, time). Only points with a stored successor participate.
inline std::vector<Neighbor> nearest_transitions(
    const VehicleState& x, const std::vector<WindowRecord>& window, int P,
    const Vec6& scaling) {
  std::vector<Neighbor> all;
  const Vec6 xv = x.to_vec();
  for (std::size_t w = 0; w < window.size(); ++w) {
    const IterationRecord& rec = *window[w].record;
    for (std::size_t t = 0; t < rec.usable(); ++t) {
      const Vec6 d = scaling.cwiseProduct(rec.states[t].to_vec() - xv);
      all.push_back({d.squaredNorm(), static_cast<int>(w), static_cast<int>(t)});
    }
  }
  if (static_cast<int>(all.size()) < P)
    throw std::runtime_error("sys_id: insufficient data for regression");
  auto cmp = [&](const Neighbor& a, const Neighbor& b) {
    if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
    const int ia = window[a.window_pos].iteration;
    const int ib = window[b.window_pos].iteration;
    if (ia != ib) return ia < ib;
    return a.time < b.time;
  };
  std::nth_element(all.begin(), all.begin() + (P - 1), all.end(), cmp);
  std::sort(all.begin(), all.begin() + P, cmp);
  all.resize(P);
  return all;
}

inline Vec5 features(const VehicleState& x, const ControlInput& u,
                     VelComponent comp) {
  Vec5 f;
  f << x.vx, x.vy, x.wz, (comp == VelComponent::vx ? u.a : u.delta), 1.0;
  return f;
}

inline double target(const VehicleState& next, VelComponent comp) {
  switch (comp) {
    case VelComponent::vx: return next.vx;
    case VelComponent::vy: return next.vy;
    default: return next.wz;
  }
}

inline RegressorVector solve_wls(const Mat5& gram, const Vec5& rhs, double ridge) {
  Mat5 g = gram;
  g.diagonal().array() += ridge;
  if (ridge == 0.0) {
    Eigen::FullPivLU<Mat5> lu(g);
    if (!lu.isInvertible())
      throw std::runtime_error("sys_id: singular regression");
    return lu.solve(rhs);
  }
  return g.ldlt().solve(rhs);
}

}  // namespace detail

inline std::vector<std::pair<int, int>> nearest_data_indices(
    const VehicleState& x, const std::vector<WindowRecord>& window, int P,
    const Vec6& scaling) {
  std::vector<std::pair<int, int>> out;
  for (const auto& nb : detail::nearest_transitions(x, window, P, scaling))
    out.emplace_back(window[nb.window_pos].iteration, nb.time);
  return out;
}

// Kernel-weighted least squares over the P nearest stored transitions
// (Epanechnikov weights on the squared Q-distance over the bandwidth), with a
// small ridge. Feature order: [v_x, v_y, w_z, input, 1], where the input is a
// for the v_x row and delta otherwise.
inline RegressorVector local_linear_regression(
    const VehicleState& x, VelComponent comp,
    const std::vector<WindowRecord>& window, const KernelConfig& cfg) {
  cfg.validate();
  const auto nbs = detail::nearest_transitions(x, window, cfg.neighbors, cfg.scaling);
  Mat5 gram = Mat5::Zero();
  Vec5 rhs = Vec5::Zero();
  int active = 0;
  for (const auto& nb : nbs) {
    const double wgt = epanechnikov(nb.dist2 / cfg.bandwidth);
    if (wgt <= 0.0) continue;
    ++active;
    const IterationRecord& rec = *window[nb.window_pos].record;
    const Vec5 f = detail::features(rec.states[nb.time], rec.inputs[nb.time], comp);
    gram.noalias() += wgt * f * f.transpose();
    rhs.noalias() += wgt * f * detail::target(rec.states[nb.time + 1], comp);
  }
  if (active < 5)
    throw std::runtime_error("sys_id: insufficient data for regression");
  return detail::solve_wls(gram, rhs, cfg.ridge);
}

// Euler-discretized curvilinear kinematics; returns (e_psi', s', e_y').
inline Eigen::Vector3d kinematic_step(const VehicleState& x, double dt, double kappa) {
  const double den = 1.0 - kappa * x.ey;
  if (den <= 0.0) throw std::runtime_error("sys_id: off-track singularity");
  const double c = std::cos(x.epsi), sn = std::sin(x.epsi);
  const double vproj = x.vx * c - x.vy * sn;
  return Eigen::Vector3d(x.epsi + dt * (x.wz - kappa * vproj / den),
                         x.s + dt * vproj / den,
                         x.ey + dt * (x.vx * sn + x.vy * c));
}

inline Eigen::Vector3d kinematic_step(const VehicleState& x, double dt,
                                      const Track& track) {
  return kinematic_step(x, dt, track.curvature(x.s));
}

// Analytic gradients of the kinematic map, rows (e_psi, s, e_y) by columns
// [v_x, v_y, w_z, e_psi, s, e_y]. Curvature is piecewise constant, so its
// s-derivative is zero.
inline Eigen::Matrix<double, 3, 6> kinematic_jacobians(const VehicleState& x,
                                                       double dt, double kappa) {
  const double den = 1.0 - kappa * x.ey;
  if (den <= 0.0) throw std::runtime_error("sys_id: off-track singularity");
  const double c = std::cos(x.epsi), sn = std::sin(x.epsi);
  const double vproj = x.vx * c - x.vy * sn;
  const double dv_depsi = -x.vx * sn - x.vy * c;
  Eigen::Matrix<double, 3, 6> jac;
  jac.row(0) << -dt * kappa * c / den, dt * kappa * sn / den, dt,
      1.0 - dt * kappa * dv_depsi / den, 0.0, -dt * kappa * kappa * vproj / (den * den);
  jac.row(1) << dt * c / den, -dt * sn / den, 0.0, dt * dv_depsi / den, 1.0,
      dt * vproj * kappa / (den * den);
  jac.row(2) << dt * sn, dt * c, 0.0, dt * (x.vx * c - x.vy * sn), 0.0, 1.0;
  return jac;
}

inline Eigen::Matrix<double, 3, 6> kinematic_jacobians(const VehicleState& x,
                                                       double dt,
                                                       const Track& track) {
  return kinematic_jacobians(x, dt, track.curvature(x.s));
}

// Affine time-varying model x_{k+1} = A_k x_k + B_k u_k + C_k along a
// candidate trajectory: velocity rows from the local linear regressors,
// position rows from the linearized kinematics.
struct AtvModel {
  std::vector<Mat6> A;
  std::vector<Mat62> B;
  std::vector<Vec6> C;

  int horizon() const { return static_cast<int>(A.size()); }
};

// Builds N = candidate.size() - 1 triples, linearizing at the first N
// candidate states. One neighbor set is shared by the three regressions at
// each point; inputs in the features come from the stored data.
inline AtvModel build_atv_model(const std::vector<VehicleState>& candidate,
                                const std::vector<WindowRecord>& window,
                                const KernelConfig& cfg, const Track& track,
                                double dt) {
  if (candidate.size() < 2)
    throw std::invalid_argument("sys_id: candidate must have at least 2 states");
  cfg.validate();
  const int n = static_cast<int>(candidate.size()) - 1;
  AtvModel model;
  model.A.resize(n);
  model.B.resize(n);
  model.C.resize(n);
  for (int k = 0; k < n; ++k) {
    const VehicleState& xb = candidate[k];
    const auto nbs = detail::nearest_transitions(xb, window, cfg.neighbors, cfg.scaling);
    Mat5 gram_a = Mat5::Zero(), gram_d = Mat5::Zero();
    Vec5 rhs_vx = Vec5::Zero(), rhs_vy = Vec5::Zero(), rhs_wz = Vec5::Zero();
    int active = 0;
    for (const auto& nb : nbs) {
      const double wgt = epanechnikov(nb.dist2 / cfg.bandwidth);
      if (wgt <= 0.0) continue;
      ++active;
      const IterationRecord& rec = *window[nb.window_pos].record;
      const Vec5 fa = detail::features(rec.states[nb.time], rec.inputs[nb.time],
                                       VelComponent::vx);
      const Vec5 fd = detail::features(rec.states[nb.time], rec.inputs[nb.time],
                                       VelComponent::vy);
      gram_a.noalias() += wgt * fa * fa.transpose();
      gram_d.noalias() += wgt * fd * fd.transpose();
      const VehicleState& nx = rec.states[nb.time + 1];
      rhs_vx.noalias() += wgt * fa * nx.vx;
      rhs_vy.noalias() += wgt * fd * nx.vy;
      rhs_wz.noalias() += wgt * fd * nx.wz;
    }
    if (active < 5)
      throw std::runtime_error("sys_id: insufficient data for regression");
    const RegressorVector g_vx = detail::solve_wls(gram_a, rhs_vx, cfg.ridge);
    const RegressorVector g_vy = detail::solve_wls(gram_d, rhs_vy, cfg.ridge);
    const RegressorVector g_wz = detail::solve_wls(gram_d, rhs_wz, cfg.ridge);

    Mat6& A = model.A[k];
    Mat62& B = model.B[k];
    Vec6& C = model.C[k];
    A.setZero();
    B.setZero();
    A.block<1, 3>(0, 0) = g_vx.head<3>().transpose();
    A.block<1, 3>(1, 0) = g_vy.head<3>().transpose();
    A.block<1, 3>(2, 0) = g_wz.head<3>().transpose();
    B(0, 1) = g_vx(3);  // a drives v_x
    B(1, 0) = g_vy(3);  // delta drives v_y and w_z
    B(2, 0) = g_wz(3);
    C(0) = g_vx(4);
    C(1) = g_vy(4);
    C(2) = g_wz(4);

    const double kappa = track.curvature(xb.s);
    const auto jac = kinematic_jacobians(xb, dt, kappa);
    const auto f = kinematic_step(xb, dt, kappa);
    A.bottomRows<3>() = jac;
    C.tail<3>() = f - jac * xb.to_vec();
  }
  return model;
}

}  // namespace lmpc
