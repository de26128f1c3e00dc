#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>

namespace lmpc {

// Bounds with |value| >= kQpInf are treated as absent.
constexpr double kQpInf = 1e30;

// min 1/2 x'Hx + q'x  s.t.  A_eq x = b_eq,  lower <= A_in x <= upper
struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd q;
  Eigen::MatrixXd A_eq;
  Eigen::VectorXd b_eq;
  Eigen::MatrixXd A_in;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  Eigen::Index n() const { return q.size(); }
  Eigen::Index m_eq() const { return b_eq.size(); }
  Eigen::Index m_in() const { return lower.size(); }

  void validate() const {
    const Eigen::Index nv = n();
    if (H.rows() != nv || H.cols() != nv)
      throw std::invalid_argument("qp: H dimension mismatch");
    const double hnorm = std::max(1.0, H.cwiseAbs().maxCoeff());
    if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-12 * hnorm)
      throw std::invalid_argument("qp: H not symmetric");
    if (A_eq.rows() != m_eq() || (m_eq() > 0 && A_eq.cols() != nv))
      throw std::invalid_argument("qp: equality block dimension mismatch");
    if (A_in.rows() != m_in() || upper.size() != m_in() ||
        (m_in() > 0 && A_in.cols() != nv))
      throw std::invalid_argument("qp: inequality block dimension mismatch");
  }
};

enum class QpStatus { optimal, infeasible, max_iters };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    default: return "max_iters";
  }
}

struct QpSolution {
  Eigen::VectorXd primal;
  Eigen::VectorXd dual_eq;
  Eigen::VectorXd dual_in;
  QpStatus status = QpStatus::max_iters;
  int iterations = 0;
  double solve_time = 0.0;  // seconds
  double objective = 0.0;
  // KKT residuals at the reported point (unscaled)
  double stationarity_res = 0.0;
  double eq_res = 0.0;
  double ineq_res = 0.0;
  double comp_res = 0.0;
};

struct QpWarmStart {
  Eigen::VectorXd primal;
  Eigen::VectorXd dual_eq;
  Eigen::VectorXd dual_in;
};

struct QpSettings {
  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  double eps_prim_inf = 1e-5;
  int max_iters = 4000;
  double sigma = 1e-7;       // regularization for the semidefinite blocks
  double rho = 0.1;
  double rho_eq_scale = 1e3; // equality rows use a stiffer step
  double alpha = 1.6;        // over-relaxation
  int check_interval = 25;
  int scaling_iters = 10;    // modified Ruiz equilibration passes
  bool adaptive_rho = true;
  bool polish = true;
  double polish_reg = 1e-9;
  int polish_refine_steps = 3;
};

// Dense convex QP solver: ADMM operator splitting with Ruiz equilibration,
// over-relaxation, adaptive step refactorization, primal-infeasibility
// certificate, and an active-set polish of the converged iterate.
class QpSolver {
 public:
  explicit QpSolver(QpSettings settings = {}) : st_(settings) {}

  const QpSettings& settings() const { return st_; }
  QpSettings& settings() { return st_; }

  QpSolution solve(const QpProblem& p,
                   const std::optional<QpWarmStart>& warm = std::nullopt) const {
    const auto t0 = std::chrono::steady_clock::now();
    p.validate();
    const Eigen::Index n = p.n();
    const Eigen::Index me = p.m_eq();
    const Eigen::Index mi = p.m_in();
    const Eigen::Index m = me + mi;

    Eigen::MatrixXd H = 0.5 * (p.H + p.H.transpose());
    {
      Eigen::LLT<Eigen::MatrixXd> chol(
          H + std::max(st_.sigma, 1e-9) * Eigen::MatrixXd::Identity(n, n));
      if (chol.info() != Eigen::Success)
        throw std::invalid_argument("qp: H not positive semidefinite");
    }

    // stacked constraints: equalities first
    Eigen::MatrixXd A(m, n);
    Eigen::VectorXd l(m), u(m);
    if (me > 0) {
      A.topRows(me) = p.A_eq;
      l.head(me) = p.b_eq;
      u.head(me) = p.b_eq;
    }
    if (mi > 0) {
      A.bottomRows(mi) = p.A_in;
      l.tail(mi) = p.lower;
      u.tail(mi) = p.upper;
    }

    // --- modified Ruiz equilibration ---
    Eigen::VectorXd d_scale = Eigen::VectorXd::Ones(n);
    Eigen::VectorXd e_scale = Eigen::VectorXd::Ones(m);
    double c_scale = 1.0;
    Eigen::MatrixXd Hs = H;
    Eigen::VectorXd qs = p.q;
    Eigen::MatrixXd As = A;
    for (int it = 0; it < st_.scaling_iters; ++it) {
      Eigen::VectorXd dx(n), de(m);
      for (Eigen::Index i = 0; i < n; ++i) {
        double norm = Hs.col(i).cwiseAbs().maxCoeff();
        if (m > 0) norm = std::max(norm, As.col(i).cwiseAbs().maxCoeff());
        dx(i) = safe_inv_sqrt(norm);
      }
      for (Eigen::Index j = 0; j < m; ++j)
        de(j) = safe_inv_sqrt(As.row(j).cwiseAbs().maxCoeff());
      Hs = dx.asDiagonal() * Hs * dx.asDiagonal();
      qs = dx.asDiagonal() * qs;
      if (m > 0) As = de.asDiagonal() * As * dx.asDiagonal();
      d_scale = d_scale.cwiseProduct(dx);
      e_scale = e_scale.cwiseProduct(de);
      double col_mean = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) col_mean += Hs.col(i).cwiseAbs().maxCoeff();
      col_mean = n > 0 ? col_mean / double(n) : 0.0;
      const double gamma = safe_inv(std::max(col_mean, qs.cwiseAbs().maxCoeff()));
      Hs *= gamma;
      qs *= gamma;
      c_scale *= gamma;
    }
    Eigen::VectorXd ls(m), us(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      ls(j) = l(j) <= -kQpInf ? l(j) : e_scale(j) * l(j);
      us(j) = u(j) >= kQpInf ? u(j) : e_scale(j) * u(j);
    }

    // per-row step: equality rows (l == u) get rho_eq_scale
    double rho_bar = st_.rho;
    Eigen::VectorXd rho_vec(m);
    auto fill_rho = [&](double rb) {
      for (Eigen::Index j = 0; j < m; ++j)
        rho_vec(j) = (j < me || l(j) == u(j)) ? rb * st_.rho_eq_scale : rb;
    };
    fill_rho(rho_bar);

    Eigen::LLT<Eigen::MatrixXd> kkt;
    auto factor = [&]() {
      Eigen::MatrixXd M = Hs;
      M.diagonal().array() += st_.sigma;
      if (m > 0) M.noalias() += As.transpose() * rho_vec.asDiagonal() * As;
      kkt.compute(M);
      if (kkt.info() != Eigen::Success)
        throw std::runtime_error("qp: reduced system factorization failed");
    };
    factor();

    // scaled iterates
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(m);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
    if (warm) {
      if (warm->primal.size() == n)
        x = d_scale.cwiseInverse().asDiagonal() * warm->primal;
      Eigen::VectorXd yw = Eigen::VectorXd::Zero(m);
      if (warm->dual_eq.size() == me && me > 0) yw.head(me) = warm->dual_eq;
      if (warm->dual_in.size() == mi && mi > 0) yw.tail(mi) = warm->dual_in;
      y = c_scale * e_scale.cwiseInverse().asDiagonal() * yw;
      if (m > 0) z = As * x;
    }

    QpSolution best;
    double best_score = std::numeric_limits<double>::infinity();
    QpSolution sol;
    sol.status = QpStatus::max_iters;
    int iter = 0;
    for (iter = 1; iter <= st_.max_iters; ++iter) {
      Eigen::VectorXd rhs = st_.sigma * x - qs;
      if (m > 0) rhs.noalias() += As.transpose() * (rho_vec.cwiseProduct(z) - y);
      const Eigen::VectorXd x_tilde = kkt.solve(rhs);
      Eigen::VectorXd z_tilde(m);
      if (m > 0) z_tilde.noalias() = As * x_tilde;
      const Eigen::VectorXd x_next = st_.alpha * x_tilde + (1.0 - st_.alpha) * x;
      const Eigen::VectorXd z_relax = st_.alpha * z_tilde + (1.0 - st_.alpha) * z;
      Eigen::VectorXd z_next(m), y_next(m);
      for (Eigen::Index j = 0; j < m; ++j) {
        const double zv = z_relax(j) + y(j) / rho_vec(j);
        z_next(j) = std::clamp(zv, ls(j), us(j));
        y_next(j) = y(j) + rho_vec(j) * (z_relax(j) - z_next(j));
      }

      // primal infeasibility certificate from the dual direction
      if (m > 0) {
        const Eigen::VectorXd dy_u =
            e_scale.cwiseProduct(y_next - y) / c_scale;
        const double dy_norm = dy_u.cwiseAbs().maxCoeff();
        if (dy_norm > 1e-12) {
          const double at_dy =
              (A.transpose() * dy_u).cwiseAbs().maxCoeff();
          double support = 0.0;
          bool bounded_support = true;
          for (Eigen::Index j = 0; j < m; ++j) {
            const double pos = std::max(dy_u(j), 0.0);
            const double neg = std::min(dy_u(j), 0.0);
            if (pos > st_.eps_prim_inf * dy_norm && u(j) >= kQpInf) bounded_support = false;
            if (neg < -st_.eps_prim_inf * dy_norm && l(j) <= -kQpInf) bounded_support = false;
            if (u(j) < kQpInf) support += u(j) * pos;
            if (l(j) > -kQpInf) support += l(j) * neg;
          }
          if (bounded_support && at_dy <= st_.eps_prim_inf * dy_norm &&
              support <= -st_.eps_prim_inf * dy_norm) {
            x = x_next; z = z_next; y = y_next;
            sol = extract(p, H, x, y, d_scale, e_scale, c_scale, me, mi);
            sol.status = QpStatus::infeasible;
            sol.iterations = iter;
            sol.solve_time = elapsed(t0);
            return sol;
          }
        }
      }

      x = x_next;
      z = z_next;
      y = y_next;

      if (iter % st_.check_interval == 0 || iter == st_.max_iters) {
        // unscaled residuals
        const Eigen::VectorXd xu = d_scale.cwiseProduct(x);
        const Eigen::VectorXd zu = e_scale.cwiseInverse().cwiseProduct(z);
        const Eigen::VectorXd yu = e_scale.cwiseProduct(y) / c_scale;
        const Eigen::VectorXd ax = m > 0 ? Eigen::VectorXd(A * xu) : Eigen::VectorXd(0);
        const Eigen::VectorXd hx = H * xu;
        const Eigen::VectorXd aty =
            m > 0 ? Eigen::VectorXd(A.transpose() * yu) : Eigen::VectorXd::Zero(n);
        const double r_prim = m > 0 ? (ax - zu).cwiseAbs().maxCoeff() : 0.0;
        const double r_dual = (hx + p.q + aty).cwiseAbs().maxCoeff();
        const double prim_scale =
            m > 0 ? std::max(ax.cwiseAbs().maxCoeff(), zu.cwiseAbs().maxCoeff()) : 0.0;
        const double dual_scale =
            std::max({hx.cwiseAbs().maxCoeff(), aty.cwiseAbs().maxCoeff(),
                      p.q.cwiseAbs().maxCoeff()});
        const double eps_prim = st_.eps_abs + st_.eps_rel * prim_scale;
        const double eps_dual = st_.eps_abs + st_.eps_rel * dual_scale;
        const double score = std::max(r_prim - eps_prim, r_dual - eps_dual);
        if (score < best_score) {
          best_score = score;
          best = extract(p, H, x, y, d_scale, e_scale, c_scale, me, mi);
          best.iterations = iter;
        }
        if (r_prim <= eps_prim && r_dual <= eps_dual) {
          sol = extract(p, H, x, y, d_scale, e_scale, c_scale, me, mi);
          sol.status = QpStatus::optimal;
          sol.iterations = iter;
          if (st_.polish) try_polish(p, H, me, mi, l, u, sol);
          sol.solve_time = elapsed(t0);
          return sol;
        }
        if (st_.adaptive_rho && iter != st_.max_iters && m > 0) {
          const double rp_n = r_prim / std::max(prim_scale, 1e-10);
          const double rd_n = r_dual / std::max(dual_scale, 1e-10);
          const double ratio = std::sqrt(rp_n / std::max(rd_n, 1e-16));
          if (ratio > 5.0 || ratio < 0.2) {
            rho_bar = std::clamp(rho_bar * ratio, 1e-6, 1e6);
            fill_rho(rho_bar);
            factor();
          }
        }
      }
    }
    best.status = QpStatus::max_iters;
    best.solve_time = elapsed(t0);
    if (best.primal.size() == 0)
      best = extract(p, H, x, y, d_scale, e_scale, c_scale, me, mi);
    return best;
  }

 private:
  static double safe_inv_sqrt(double v) {
    if (v <= 0.0 || !std::isfinite(v)) return 1.0;
    return std::clamp(1.0 / std::sqrt(v), 1e-6, 1e6);
  }
  static double safe_inv(double v) {
    if (v <= 0.0 || !std::isfinite(v)) return 1.0;
    return std::clamp(1.0 / v, 1e-6, 1e6);
  }
  static double elapsed(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  // Unscale iterates and compute KKT residuals at the point.
  QpSolution extract(const QpProblem& p, const Eigen::MatrixXd& H,
                     const Eigen::VectorXd& x_s, const Eigen::VectorXd& y_s,
                     const Eigen::VectorXd& d_scale, const Eigen::VectorXd& e_scale,
                     double c_scale, Eigen::Index me, Eigen::Index mi) const {
    QpSolution sol;
    sol.primal = d_scale.cwiseProduct(x_s);
    const Eigen::VectorXd y = e_scale.cwiseProduct(y_s) / c_scale;
    sol.dual_eq = y.head(me);
    sol.dual_in = y.tail(mi);
    fill_metrics(p, H, sol);
    return sol;
  }

  static void fill_metrics(const QpProblem& p, const Eigen::MatrixXd& H,
                           QpSolution& sol) {
    const Eigen::VectorXd& x = sol.primal;
    sol.objective = 0.5 * x.dot(H * x) + p.q.dot(x);
    Eigen::VectorXd grad = H * x + p.q;
    if (p.m_eq() > 0) grad.noalias() += p.A_eq.transpose() * sol.dual_eq;
    if (p.m_in() > 0) grad.noalias() += p.A_in.transpose() * sol.dual_in;
    sol.stationarity_res = grad.cwiseAbs().maxCoeff();
    sol.eq_res = p.m_eq() > 0 ? (p.A_eq * x - p.b_eq).cwiseAbs().maxCoeff() : 0.0;
    sol.ineq_res = 0.0;
    sol.comp_res = 0.0;
    if (p.m_in() > 0) {
      const Eigen::VectorXd ax = p.A_in * x;
      for (Eigen::Index j = 0; j < p.m_in(); ++j) {
        if (p.lower(j) > -kQpInf)
          sol.ineq_res = std::max(sol.ineq_res, p.lower(j) - ax(j));
        if (p.upper(j) < kQpInf)
          sol.ineq_res = std::max(sol.ineq_res, ax(j) - p.upper(j));
        const double mu = sol.dual_in(j);
        if (mu > 0.0 && p.upper(j) < kQpInf)
          sol.comp_res = std::max(sol.comp_res, mu * std::abs(p.upper(j) - ax(j)));
        if (mu < 0.0 && p.lower(j) > -kQpInf)
          sol.comp_res = std::max(sol.comp_res, -mu * std::abs(ax(j) - p.lower(j)));
      }
    }
  }

  // Solve the equality-constrained QP on the active set guessed from the dual
  // signs, then refine the guess: violated rows enter, wrong-signed duals
  // leave. Keep the result only if it improves the KKT residuals.
  void try_polish(const QpProblem& p, const Eigen::MatrixXd& H, Eigen::Index me,
                  Eigen::Index mi, const Eigen::VectorXd& l,
                  const Eigen::VectorXd& u, QpSolution& sol) const {
    const Eigen::Index n = p.n();
    // -1 lower active, 0 inactive, +1 upper active
    std::vector<int> active(mi, 0);
    for (Eigen::Index j = 0; j < mi; ++j) {
      if (sol.dual_in(j) < 0.0 && l(me + j) > -kQpInf) active[j] = -1;
      else if (sol.dual_in(j) > 0.0 && u(me + j) < kQpInf) active[j] = 1;
    }

    QpSolution cand = sol;
    bool solved = false;
    for (int round = 0; round < 10; ++round) {
      std::vector<Eigen::Index> rows;
      for (Eigen::Index j = 0; j < mi; ++j)
        if (active[j] != 0) rows.push_back(j);
      const Eigen::Index ma = me + static_cast<Eigen::Index>(rows.size());
      Eigen::MatrixXd Aact(ma, n);
      Eigen::VectorXd bact(ma);
      if (me > 0) {
        Aact.topRows(me) = p.A_eq;
        bact.head(me) = p.b_eq;
      }
      for (std::size_t i = 0; i < rows.size(); ++i) {
        Aact.row(me + i) = p.A_in.row(rows[i]);
        bact(me + i) = active[rows[i]] < 0 ? p.lower(rows[i]) : p.upper(rows[i]);
      }

      const Eigen::Index dim = n + ma;
      Eigen::MatrixXd K = Eigen::MatrixXd::Zero(dim, dim);
      K.topLeftCorner(n, n) = H;
      if (ma > 0) {
        K.topRightCorner(n, ma) = Aact.transpose();
        K.bottomLeftCorner(ma, n) = Aact;
      }
      Eigen::MatrixXd Kreg = K;
      Kreg.topLeftCorner(n, n).diagonal().array() += st_.polish_reg;
      Kreg.bottomRightCorner(ma, ma).diagonal().array() -= st_.polish_reg;
      Eigen::VectorXd rhs(dim);
      rhs.head(n) = -p.q;
      rhs.tail(ma) = bact;
      Eigen::PartialPivLU<Eigen::MatrixXd> lu(Kreg);
      Eigen::VectorXd w = lu.solve(rhs);
      for (int it = 0; it < st_.polish_refine_steps; ++it)
        w += lu.solve(rhs - K * w);
      if (!w.allFinite()) return;

      cand.primal = w.head(n);
      cand.dual_eq = w.segment(n, me);
      cand.dual_in.setZero(mi);
      for (std::size_t i = 0; i < rows.size(); ++i)
        cand.dual_in(rows[i]) = w(n + me + i);

      bool changed = false;
      const Eigen::VectorXd ax = mi > 0 ? Eigen::VectorXd(p.A_in * cand.primal)
                                        : Eigen::VectorXd(0);
      for (Eigen::Index j = 0; j < mi; ++j) {
        if (active[j] == 0) {
          if (l(me + j) > -kQpInf && ax(j) < p.lower(j) - 1e-10) {
            active[j] = -1;
            changed = true;
          } else if (u(me + j) < kQpInf && ax(j) > p.upper(j) + 1e-10) {
            active[j] = 1;
            changed = true;
          }
        } else if (active[j] < 0 && cand.dual_in(j) > 1e-10) {
          active[j] = 0;
          changed = true;
        } else if (active[j] > 0 && cand.dual_in(j) < -1e-10) {
          active[j] = 0;
          changed = true;
        }
      }
      if (!changed) {
        solved = true;
        break;
      }
    }
    if (!solved) return;

    fill_metrics(p, H, cand);
    const double cand_worst = std::max({cand.stationarity_res, cand.eq_res,
                                        cand.ineq_res, cand.comp_res});
    const double sol_worst = std::max({sol.stationarity_res, sol.eq_res,
                                       sol.ineq_res, sol.comp_res});
    if (cand_worst <= sol_worst) {
      cand.status = sol.status;
      cand.iterations = sol.iterations;
      cand.solve_time = sol.solve_time;
      sol = cand;
    }
  }

  QpSettings st_;
};

}  // namespace lmpc
