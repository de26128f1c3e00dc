#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <random>

#include "lmpc/qp.hpp"

namespace lmpc::test {

// Exhaustive active-set enumeration for strictly convex QPs with box
// constraints on the variables plus a few equalities. Every variable is
// tried free / at lower / at upper; a pattern is accepted when the KKT
// system solves with feasible primal and correctly signed duals.
// Independent of the ADMM path by construction.
inline std::optional<Eigen::VectorXd> active_set_box_qp(
    const Eigen::MatrixXd& H, const Eigen::VectorXd& q,
    const Eigen::MatrixXd& A_eq, const Eigen::VectorXd& b_eq,
    const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  const int n = static_cast<int>(q.size());
  const int me = static_cast<int>(b_eq.size());
  std::optional<Eigen::VectorXd> best;
  double best_obj = std::numeric_limits<double>::infinity();

  long patterns = 1;
  for (int i = 0; i < n; ++i) patterns *= 3;
  for (long code = 0; code < patterns; ++code) {
    long rem = code;
    std::vector<int> state(n);  // 0 free, 1 lower, 2 upper
    int fixed = 0;
    for (int i = 0; i < n; ++i) {
      state[i] = rem % 3;
      rem /= 3;
      if (state[i] != 0) ++fixed;
    }
    const int m = me + fixed;
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + m, n + m);
    Eigen::VectorXd rhs(n + m);
    K.topLeftCorner(n, n) = H;
    rhs.head(n) = -q;
    if (me > 0) {
      K.block(n, 0, me, n) = A_eq;
      K.block(0, n, n, me) = A_eq.transpose();
      rhs.segment(n, me) = b_eq;
    }
    int r = me;
    for (int i = 0; i < n; ++i) {
      if (state[i] == 0) continue;
      K(n + r, i) = 1.0;
      K(i, n + r) = 1.0;
      rhs(n + r) = state[i] == 1 ? lower(i) : upper(i);
      ++r;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
    if (!lu.isInvertible()) continue;
    const Eigen::VectorXd w = lu.solve(rhs);
    const Eigen::VectorXd x = w.head(n);

    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      if (state[i] == 0)
        ok = x(i) >= lower(i) - 1e-9 && x(i) <= upper(i) + 1e-9;
    }
    r = me;
    for (int i = 0; i < n && ok; ++i) {
      if (state[i] == 0) continue;
      const double mu = w(n + r);
      // stationarity reads Hx + q + A'nu + mu e_i = 0; lower-active rows
      // need mu <= 0, upper-active rows mu >= 0
      if (state[i] == 1 && mu > 1e-9) ok = false;
      if (state[i] == 2 && mu < -1e-9) ok = false;
      ++r;
    }
    if (!ok) continue;
    const double obj = 0.5 * x.dot(H * x) + q.dot(x);
    if (obj < best_obj - 1e-12) {
      best_obj = obj;
      best = x;
    }
  }
  return best;
}

struct RandomBoxQp {
  QpProblem problem;
  Eigen::VectorXd feasible_point;
};

inline RandomBoxQp random_box_qp(std::mt19937& rng, int max_vars = 8) {
  std::uniform_int_distribution<int> un(2, max_vars);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int n = un(rng);

  RandomBoxQp out;
  QpProblem& p = out.problem;
  Eigen::MatrixXd M(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) M(i, j) = gauss(rng);
  p.H = M.transpose() * M + 0.5 * Eigen::MatrixXd::Identity(n, n);
  p.q.resize(n);
  for (int i = 0; i < n; ++i) p.q(i) = 2.0 * gauss(rng);

  p.lower.resize(n);
  p.upper.resize(n);
  Eigen::VectorXd x0(n);
  for (int i = 0; i < n; ++i) {
    p.lower(i) = -1.0 - uni(rng);
    p.upper(i) = 1.0 + uni(rng);
    x0(i) = p.lower(i) + uni(rng) * (p.upper(i) - p.lower(i));
  }
  p.A_in = Eigen::MatrixXd::Identity(n, n);

  const int me = n > 2 ? 2 : 1;
  p.A_eq.resize(me, n);
  for (int r = 0; r < me; ++r)
    for (int c = 0; c < n; ++c) p.A_eq(r, c) = gauss(rng);
  p.b_eq = p.A_eq * x0;
  out.feasible_point = x0;
  return out;
}

}  // namespace lmpc::test
