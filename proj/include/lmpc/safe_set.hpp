#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lmpc/qp.hpp"
#include "lmpc/trajectory_store.hpp"
#include "lmpc/types.hpp"

namespace lmpc {

// Default KNN metric: distance in the curvilinear abscissa s only.
inline Vec6 s_only_metric() {
  Vec6 d = Vec6::Zero();
  d(4) = 1.0;
  return d;
}

// Local convex safe set data around a query point: selected states D, their
// stored one-step successors S, their costs-to-go J, and the (iteration, time)
// provenance of every column.
struct LocalSafeSetData {
  Eigen::MatrixXd D;
  Eigen::MatrixXd S;
  Eigen::RowVectorXd J;
  std::vector<std::pair<int, int>> provenance;

  Eigen::Index cols() const { return D.cols(); }
};

// K time indices of the record minimizing the weighted squared distance to x,
// searched over [0, max_index) (the whole record by default). Ties go to the
// lower time index. Returned sorted ascending.
inline std::vector<int> nearest_time_indices(const IterationRecord& rec,
                                             const VehicleState& x, int K,
                                             const Vec6& metric = s_only_metric(),
                                             int max_index = -1) {
  const int count = max_index < 0 ? static_cast<int>(rec.size())
                                  : std::min<int>(max_index, rec.size());
  if (K < 1 || K > count)
    throw std::runtime_error("safe_set: insufficient data for KNN");

  const bool s_only = metric(4) != 0.0 && metric(0) == 0.0 && metric(1) == 0.0 &&
                      metric(2) == 0.0 && metric(3) == 0.0 && metric(5) == 0.0;
  std::vector<int> idx;
  idx.reserve(K);
  if (s_only) {
    // stored s is strictly increasing: binary search + two-pointer expansion
    int hi = static_cast<int>(std::upper_bound(
                 rec.states.begin(), rec.states.begin() + count, x.s,
                 [](double v, const VehicleState& st) { return v < st.s; }) -
             rec.states.begin());
    int lo = hi - 1;
    while (static_cast<int>(idx.size()) < K) {
      if (lo < 0) idx.push_back(hi++);
      else if (hi >= count) idx.push_back(lo--);
      else if (x.s - rec.states[lo].s <= rec.states[hi].s - x.s) idx.push_back(lo--);
      else idx.push_back(hi++);
    }
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  const Vec6 xv = x.to_vec();
  std::vector<std::pair<double, int>> dist(count);
  for (int t = 0; t < count; ++t) {
    const Vec6 d = metric.cwiseProduct(rec.states[t].to_vec() - xv);
    dist[t] = {d.squaredNorm(), t};
  }
  std::nth_element(dist.begin(), dist.begin() + (K - 1), dist.end());
  std::sort(dist.begin(), dist.begin() + K);
  for (int i = 0; i < K; ++i) idx.push_back(dist[i].second);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Assembles D, S, J over the window: K nearest neighbors per iteration,
// restricted to points whose successor is stored.
inline LocalSafeSetData build_local_data(const VehicleState& x,
                                         const std::vector<WindowRecord>& window,
                                         int K,
                                         const Vec6& metric = s_only_metric()) {
  if (window.empty()) throw std::runtime_error("safe_set: empty window");
  LocalSafeSetData data;
  const Eigen::Index cols = static_cast<Eigen::Index>(K) * window.size();
  data.D.resize(6, cols);
  data.S.resize(6, cols);
  data.J.resize(cols);
  data.provenance.reserve(cols);
  Eigen::Index c = 0;
  for (const auto& wr : window) {
    const IterationRecord& rec = *wr.record;
    const auto idx = nearest_time_indices(rec, x, K, metric,
                                          static_cast<int>(rec.usable()));
    for (int t : idx) {
      data.D.col(c) = rec.states[t].to_vec();
      data.S.col(c) = rec.states[t + 1].to_vec();
      data.J(c) = static_cast<double>(rec.cost_to_go[t]);
      data.provenance.emplace_back(wr.iteration, t);
      ++c;
    }
  }
  return data;
}

struct QValueResult {
  QpStatus status = QpStatus::infeasible;
  double value = 0.0;
  Eigen::VectorXd lambda;
};

// Local Q-function: min J*lambda over the simplex with D*lambda = x_bar.
// Diagnostic only; the controller folds this program into the FTOCP.
inline QValueResult q_value(const Vec6& x_bar, const LocalSafeSetData& data,
                            const QpSolver& solver = QpSolver{}) {
  const Eigen::Index m = data.cols();
  QpProblem p;
  p.H = Eigen::MatrixXd::Zero(m, m);
  p.q = data.J.transpose();
  p.A_eq.resize(7, m);
  p.A_eq.topRows(6) = data.D;
  p.A_eq.row(6).setOnes();
  p.b_eq.resize(7);
  p.b_eq.head(6) = x_bar;
  p.b_eq(6) = 1.0;
  p.A_in = Eigen::MatrixXd::Identity(m, m);
  p.lower = Eigen::VectorXd::Zero(m);
  p.upper = Eigen::VectorXd::Constant(m, kQpInf);
  const QpSolution sol = solver.solve(p);
  QValueResult res;
  res.status = sol.status;
  res.lambda = sol.primal;
  res.value = sol.status == QpStatus::optimal ? data.J.dot(sol.primal) : 0.0;
  return res;
}

}  // namespace lmpc
