#pragma once

#include <Eigen/Dense>

#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

#include "lmpc/qp.hpp"
#include "lmpc/safe_set.hpp"
#include "lmpc/sys_id.hpp"
#include "lmpc/track.hpp"
#include "lmpc/trajectory_store.hpp"
#include "lmpc/types.hpp"

namespace lmpc {

// Minimum-time stage cost: 1 before the finish line, 0 beyond it.
inline int stage_cost(const VehicleState& x, double track_length) {
  return x.s < track_length ? 1 : 0;
}

struct LmpcConfig {
  int horizon = 12;      // N
  int knn = 20;          // K per iteration in the safe set
  int window_laps = 2;   // safe set and data window {j - window_laps, ..., j-1}
  Vec6 knn_metric = s_only_metric();
  KernelConfig kernel;
  Eigen::Matrix2d input_rate_weight =
      (Eigen::Matrix2d() << 0.1, 0.0, 0.0, 0.01).finished();  // (delta, a)
  // hard per-step rate limits; the steering one mirrors the servo slew rate
  double delta_rate_max = 0.12;  // [rad/step]
  double a_rate_max = 1.0;       // [m/s^2 per step]
  double slack_weight = 1e4;  // quadratic penalty on e_y slack
  InputBounds input_bounds;
  double dt = 0.1;
  // Lateral bound used by the planner is half_width - ey_margin; the margin
  // absorbs one-step model mismatch so the realized trajectory stays on track.
  double ey_margin = 0.02;
  QpSettings qp;

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("lmpc: horizon must be >= 1");
    if (knn < 1) throw std::invalid_argument("lmpc: knn must be >= 1");
    if (window_laps < 1) throw std::invalid_argument("lmpc: window_laps must be >= 1");
    if (slack_weight <= 0.0) throw std::invalid_argument("lmpc: slack weight must be > 0");
    if (dt <= 0.0) throw std::invalid_argument("lmpc: dt must be > 0");
    if (ey_margin < 0.0) throw std::invalid_argument("lmpc: ey_margin must be >= 0");
    if (!(delta_rate_max > 0.0) || !(a_rate_max > 0.0))
      throw std::invalid_argument("lmpc: rate limits must be > 0");
    kernel.validate();
  }
};

// Offsets into the stacked FTOCP decision vector
// [x_0..x_N, u_0..u_{N-1}, lambda, slack_1..slack_N].
struct FtocpLayout {
  int N = 0;
  Eigen::Index M = 0;

  Eigen::Index x_off(int k) const { return 6 * k; }
  Eigen::Index u_off(int k) const { return 6 * (N + 1) + 2 * k; }
  Eigen::Index lambda_off() const { return 6 * (N + 1) + 2 * N; }
  Eigen::Index slack_off(int k) const { return lambda_off() + M + (k - 1); }
  Eigen::Index total() const { return lambda_off() + M + N; }
};

// Builds the QP for Eq. 8: ATV dynamics equalities, terminal state pinned to
// the local convex safe set with a simplex multiplier, soft |e_y| bound, hard
// input bounds. The indicator stage cost is a constant N along any plan that
// ends in the safe set, so the QP objective carries the terminal cost J*lambda
// plus the input-rate and slack regularizers.
inline QpProblem build_ftocp(const Vec6& x0, const AtvModel& atv,
                             const LocalSafeSetData& ss, const LmpcConfig& cfg,
                             double ey_bound,
                             const Vec2& u_prev = Vec2::Zero()) {
  const int N = atv.horizon();
  const Eigen::Index M = ss.cols();
  if (N < 1 || M < 1 || ss.S.cols() != M || ss.J.size() != M)
    throw std::invalid_argument("lmpc: dimension mismatch in FTOCP data");
  const FtocpLayout lay{N, M};
  const Eigen::Index n = lay.total();

  QpProblem p;
  p.H = Eigen::MatrixXd::Zero(n, n);
  p.q = Eigen::VectorXd::Zero(n);

  // input-rate cost sum ||u_{k+1} - u_k||^2_R
  const Eigen::Matrix2d R2 = 2.0 * cfg.input_rate_weight;
  for (int k = 0; k + 1 < N; ++k) {
    const Eigen::Index a = lay.u_off(k), b = lay.u_off(k + 1);
    p.H.block<2, 2>(a, a) += R2;
    p.H.block<2, 2>(b, b) += R2;
    p.H.block<2, 2>(a, b) -= R2;
    p.H.block<2, 2>(b, a) -= R2;
  }
  for (int k = 1; k <= N; ++k) p.H(lay.slack_off(k), lay.slack_off(k)) = 2.0 * cfg.slack_weight;
  p.q.segment(lay.lambda_off(), M) = ss.J.transpose();

  const Eigen::Index me = 6 + 6 * N + 6 + 1;
  p.A_eq = Eigen::MatrixXd::Zero(me, n);
  p.b_eq = Eigen::VectorXd::Zero(me);
  // initial condition
  p.A_eq.block(0, lay.x_off(0), 6, 6).setIdentity();
  p.b_eq.head(6) = x0;
  // dynamics x_{k+1} = A_k x_k + B_k u_k + C_k
  for (int k = 0; k < N; ++k) {
    const Eigen::Index r = 6 + 6 * k;
    p.A_eq.block(r, lay.x_off(k + 1), 6, 6).setIdentity();
    p.A_eq.block(r, lay.x_off(k), 6, 6) = -atv.A[k];
    p.A_eq.block(r, lay.u_off(k), 6, 2) = -atv.B[k];
    p.b_eq.segment(r, 6) = atv.C[k];
  }
  // terminal state in the convex hull: x_N - D lambda = 0, 1'lambda = 1
  {
    const Eigen::Index r = 6 + 6 * N;
    p.A_eq.block(r, lay.x_off(N), 6, 6).setIdentity();
    p.A_eq.block(r, lay.lambda_off(), 6, M) = -ss.D;
    p.A_eq.row(r + 6).segment(lay.lambda_off(), M).setOnes();
    p.b_eq(r + 6) = 1.0;
  }

  const Eigen::Index mi = M + 2 * N + N + 2 * N + 2 * N;
  p.A_in = Eigen::MatrixXd::Zero(mi, n);
  p.lower = Eigen::VectorXd::Zero(mi);
  p.upper = Eigen::VectorXd::Zero(mi);
  Eigen::Index r = 0;
  // lambda >= 0
  for (Eigen::Index c = 0; c < M; ++c, ++r) {
    p.A_in(r, lay.lambda_off() + c) = 1.0;
    p.lower(r) = 0.0;
    p.upper(r) = kQpInf;
  }
  // input bounds
  for (int k = 0; k < N; ++k) {
    p.A_in(r, lay.u_off(k)) = 1.0;
    p.lower(r) = cfg.input_bounds.delta_min;
    p.upper(r) = cfg.input_bounds.delta_max;
    ++r;
    p.A_in(r, lay.u_off(k) + 1) = 1.0;
    p.lower(r) = cfg.input_bounds.a_min;
    p.upper(r) = cfg.input_bounds.a_max;
    ++r;
  }
  // slack >= 0
  for (int k = 1; k <= N; ++k, ++r) {
    p.A_in(r, lay.slack_off(k)) = 1.0;
    p.lower(r) = 0.0;
    p.upper(r) = kQpInf;
  }
  // |e_y_k| <= ey_bound + slack_k
  for (int k = 1; k <= N; ++k) {
    p.A_in(r, lay.x_off(k) + 5) = 1.0;
    p.A_in(r, lay.slack_off(k)) = -1.0;
    p.lower(r) = -kQpInf;
    p.upper(r) = ey_bound;
    ++r;
    p.A_in(r, lay.x_off(k) + 5) = 1.0;
    p.A_in(r, lay.slack_off(k)) = 1.0;
    p.lower(r) = -ey_bound;
    p.upper(r) = kQpInf;
    ++r;
  }
  // per-step input rate limits, anchored to the previously applied input
  const Vec2 rate(cfg.delta_rate_max, cfg.a_rate_max);
  for (int i = 0; i < 2; ++i, ++r) {
    p.A_in(r, lay.u_off(0) + i) = 1.0;
    p.lower(r) = u_prev(i) - rate(i);
    p.upper(r) = u_prev(i) + rate(i);
  }
  for (int k = 0; k + 1 < N; ++k) {
    for (int i = 0; i < 2; ++i, ++r) {
      p.A_in(r, lay.u_off(k + 1) + i) = 1.0;
      p.A_in(r, lay.u_off(k) + i) = -1.0;
      p.lower(r) = -rate(i);
      p.upper(r) = rate(i);
    }
  }
  return p;
}

struct FtocpSolution {
  std::vector<VehicleState> states;  // x*_{t|t} .. x*_{t+N|t}
  std::vector<ControlInput> inputs;  // u*_{t|t} .. u*_{t+N-1|t}
  Eigen::VectorXd lambda;
  Eigen::VectorXd slack;
  double objective = 0.0;  // J*lambda + regularizers
  QpStatus status = QpStatus::max_iters;
  int iterations = 0;
  double solve_time = 0.0;
  double terminal_residual = 0.0;  // ||x_N - D lambda||_inf
  double simplex_residual = 0.0;   // max(|1'lambda - 1|, -min lambda)
  double stationarity_res = 0.0;
  double eq_res = 0.0;
  double comp_res = 0.0;
};

// Candidate terminal state recursion (t > 0 case): z = S lambda.
inline Vec6 candidate_terminal_update(const LocalSafeSetData& ss,
                                      const Eigen::VectorXd& lambda) {
  if (lambda.size() != ss.cols())
    throw std::invalid_argument("lmpc: lambda size mismatch");
  return ss.S * lambda;
}

// Receding-horizon LMPC. One instance drives one vehicle; begin_lap resets
// the candidate trajectory and terminal state from the previous lap, and
// solve_step produces the input for the current state.
class Controller {
 public:
  Controller(const Track& track, LmpcConfig cfg)
      : track_(&track), cfg_(std::move(cfg)), solver_(cfg_.qp) {
    cfg_.validate();
  }

  const LmpcConfig& config() const { return cfg_; }

  // prev_lap is lap j-1; seeds z_0 = x_N^{j-1} and the candidate trajectory
  // from the stored segment at the start line.
  void begin_lap(const IterationRecord& prev_lap) {
    const int N = cfg_.horizon;
    if (static_cast<int>(prev_lap.size()) < N + 1)
      throw std::runtime_error("lmpc: previous lap shorter than the horizon");
    t_ = 0;
    z_ = prev_lap.states[N].to_vec();
    candidate_.assign(prev_lap.states.begin(), prev_lap.states.begin() + N + 1);
    fallback_inputs_.assign(prev_lap.inputs.begin(), prev_lap.inputs.begin() + N);
    last_input_ = prev_lap.inputs.front();
    warm_.reset();
  }

  struct StepResult {
    ControlInput input;
    std::optional<FtocpSolution> solution;
    bool fallback = false;
    VehicleState z;      // candidate terminal state used at this step
    int data_points = 0; // stored states visible to this step's window
  };

  StepResult solve_step(const VehicleState& x,
                        const std::vector<WindowRecord>& window) {
    StepResult res;
    res.z = VehicleState::from_vec(z_);
    for (const auto& wr : window) res.data_points += static_cast<int>(wr.record->size());
    try {
      const LocalSafeSetData ss =
          build_local_data(res.z, window, cfg_.knn, cfg_.knn_metric);
      const AtvModel atv =
          build_atv_model(candidate_, window, cfg_.kernel, *track_, cfg_.dt);
      const QpProblem qp = build_ftocp(x.to_vec(), atv, ss, cfg_,
                                       track_->half_width() - cfg_.ey_margin,
                                       last_input_.to_vec());
      const QpSolution sol = solver_.solve(qp, make_warm_start(qp, x, ss));
      if (sol.status == QpStatus::optimal) {
        FtocpSolution fs = unpack(sol, ss, atv.horizon());
        res.input = cfg_.input_bounds.clamp(fs.inputs.front());
        advance_optimal(fs, ss);
        res.solution = std::move(fs);
        last_input_ = res.input;
        ++t_;
        return res;
      }
      res.input = fallback_input(x, window);
      res.fallback = true;
      reseed_from_stored(x, window);
      FtocpSolution fs;
      fs.status = sol.status;
      fs.iterations = sol.iterations;
      fs.solve_time = sol.solve_time;
      res.solution = std::move(fs);
    } catch (const std::exception&) {
      // insufficient data or construction failure: hold the previous plan
      res.input = fallback_input(x, window);
      res.fallback = true;
      reseed_from_stored(x, window);
    }
    last_input_ = res.input;
    ++t_;
    return res;
  }

  int step_index() const { return t_; }
  VehicleState candidate_terminal() const { return VehicleState::from_vec(z_); }
  const std::vector<VehicleState>& candidate_trajectory() const { return candidate_; }

 private:
  std::optional<QpWarmStart> make_warm_start(const QpProblem& qp,
                                             const VehicleState& x,
                                             const LocalSafeSetData& ss) const {
    const int N = cfg_.horizon;
    const FtocpLayout lay{N, ss.cols()};
    QpWarmStart ws;
    ws.primal = Eigen::VectorXd::Zero(lay.total());
    for (int k = 0; k <= N; ++k)
      ws.primal.segment<6>(lay.x_off(k)) = candidate_[k].to_vec();
    ws.primal.segment<6>(lay.x_off(0)) = x.to_vec();
    for (int k = 0; k < N; ++k) {
      const ControlInput& u = k < static_cast<int>(fallback_inputs_.size())
                                  ? fallback_inputs_[k]
                                  : last_input_;
      ws.primal.segment<2>(lay.u_off(k)) = u.to_vec();
    }
    ws.primal.segment(lay.lambda_off(), lay.M).setConstant(1.0 / double(lay.M));
    if (warm_ && warm_->dual_eq.size() == qp.m_eq() &&
        warm_->dual_in.size() == qp.m_in()) {
      ws.dual_eq = warm_->dual_eq;
      ws.dual_in = warm_->dual_in;
    }
    return ws;
  }

  FtocpSolution unpack(const QpSolution& sol, const LocalSafeSetData& ss,
                       int N) const {
    const FtocpLayout lay{N, ss.cols()};
    FtocpSolution fs;
    fs.states.reserve(N + 1);
    for (int k = 0; k <= N; ++k)
      fs.states.push_back(VehicleState::from_vec(sol.primal.segment<6>(lay.x_off(k))));
    fs.inputs.reserve(N);
    for (int k = 0; k < N; ++k)
      fs.inputs.push_back(ControlInput::from_vec(sol.primal.segment<2>(lay.u_off(k))));
    fs.lambda = sol.primal.segment(lay.lambda_off(), lay.M);
    fs.slack = sol.primal.segment(lay.slack_off(1), N);
    fs.objective = sol.objective;
    fs.status = sol.status;
    fs.iterations = sol.iterations;
    fs.solve_time = sol.solve_time;
    fs.terminal_residual =
        (fs.states.back().to_vec() - ss.D * fs.lambda).cwiseAbs().maxCoeff();
    fs.simplex_residual = std::max(std::abs(fs.lambda.sum() - 1.0),
                                   std::max(0.0, -fs.lambda.minCoeff()));
    fs.stationarity_res = sol.stationarity_res;
    fs.eq_res = sol.eq_res;
    fs.comp_res = sol.comp_res;
    warm_ = QpWarmStart{sol.primal, sol.dual_eq, sol.dual_in};
    return fs;
  }

  void advance_optimal(const FtocpSolution& fs, const LocalSafeSetData& ss) {
    z_ = candidate_terminal_update(ss, fs.lambda);
    candidate_.assign(fs.states.begin() + 1, fs.states.end());
    candidate_.push_back(VehicleState::from_vec(z_));
    fallback_inputs_.assign(fs.inputs.begin() + 1, fs.inputs.end());
  }

  // Re-anchor the candidate trajectory and terminal state on the most recent
  // stored lap at the vehicle's current progress, so the next solve targets a
  // reachable safe set again.
  void reseed_from_stored(const VehicleState& x,
                          const std::vector<WindowRecord>& window) {
    const IterationRecord& rec = *window.back().record;
    const int last = static_cast<int>(rec.size()) - 1;
    int t_star = static_cast<int>(
        std::lower_bound(rec.states.begin(), rec.states.end(), x.s,
                         [](const VehicleState& st, double v) { return st.s < v; }) -
        rec.states.begin());
    t_star = std::min(t_star, last);
    const int N = cfg_.horizon;
    candidate_.clear();
    for (int k = 0; k <= N; ++k)
      candidate_.push_back(rec.states[std::min(t_star + k, last)]);
    z_ = candidate_.back().to_vec();
  }

  ControlInput fallback_input(const VehicleState& x,
                              const std::vector<WindowRecord>& window) {
    if (!fallback_inputs_.empty()) {
      const ControlInput u = fallback_inputs_.front();
      fallback_inputs_.erase(fallback_inputs_.begin());
      return cfg_.input_bounds.clamp(u);
    }
    // previous plan exhausted: replay the stored lap's input at this progress
    const IterationRecord& rec = *window.back().record;
    const int last = static_cast<int>(rec.size()) - 1;
    int t_star = static_cast<int>(
        std::lower_bound(rec.states.begin(), rec.states.end(), x.s,
                         [](const VehicleState& st, double v) { return st.s < v; }) -
        rec.states.begin());
    t_star = std::min(t_star, last);
    return cfg_.input_bounds.clamp(rec.inputs[t_star]);
  }

  const Track* track_;
  LmpcConfig cfg_;
  QpSolver solver_;

  int t_ = 0;
  Vec6 z_ = Vec6::Zero();
  std::vector<VehicleState> candidate_;
  std::vector<ControlInput> fallback_inputs_;
  ControlInput last_input_;
  mutable std::optional<QpWarmStart> warm_;
};

}  // namespace lmpc
