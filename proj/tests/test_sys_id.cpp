#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "lmpc/sys_id.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace lmpc;
using Catch::Approx;

namespace {

// transitions generated by affine velocity dynamics plus the exact
// discretized kinematics of the given track
IterationRecord affine_system_record(const Track& track, double dt, int steps,
                                     const Eigen::Matrix3d& Av,
                                     const Eigen::Matrix<double, 3, 2>& Bv,
                                     const Eigen::Vector3d& cv, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  IterationRecord rec;
  rec.duration = steps;
  VehicleState x;
  x.vx = 1.2;
  for (int t = 0; t <= steps; ++t) {
    const ControlInput in{0.3 * u(rng), 0.8 * u(rng)};
    rec.states.push_back(x);
    rec.inputs.push_back(in);
    rec.cost_to_go.push_back(steps - t);
    const Eigen::Vector3d vel(x.vx, x.vy, x.wz);
    const Eigen::Vector3d vnext = Av * vel + Bv * Eigen::Vector2d(in.delta, in.a) + cv;
    const Eigen::Vector3d pos = kinematic_step(x, dt, track);
    x.vx = vnext(0);
    x.vy = vnext(1);
    x.wz = vnext(2);
    x.epsi = pos(0);
    x.s = pos(1);
    x.ey = pos(2);
  }
  return rec;
}

IterationRecord noisy_driving_record(std::mt19937& rng, int steps) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  IterationRecord rec;
  rec.duration = steps;
  double s = 0.0;
  for (int t = 0; t <= steps; ++t) {
    VehicleState x;
    x.vx = 1.5 + 0.8 * u(rng);
    x.vy = 0.3 * u(rng);
    x.wz = 1.2 * u(rng);
    x.epsi = 0.2 * u(rng);
    x.s = s;
    x.ey = 0.2 * u(rng);
    s += 0.15 * (1.2 + u(rng) * 0.5);
    rec.states.push_back(x);
    rec.inputs.push_back(ControlInput{0.3 * u(rng), u(rng)});
    rec.cost_to_go.push_back(steps - t);
  }
  return rec;
}

}  // namespace

TEST_CASE("epanechnikov kernel") {
  CHECK(epanechnikov(0.0) == Approx(0.75));
  CHECK(epanechnikov(1.0) == 0.0);
  CHECK(epanechnikov(0.5) == Approx(0.5625));
  CHECK(epanechnikov(-0.5) == Approx(0.5625));
  CHECK(epanechnikov(2.3) == 0.0);
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    const double w = epanechnikov(u(rng));
    CHECK(w >= 0.0);
    CHECK(w <= 0.75);
  }
}

TEST_CASE("nearest_data_indices") {
  std::mt19937 rng(17);
  const auto rec0 = noisy_driving_record(rng, 40);
  const auto rec1 = noisy_driving_record(rng, 35);
  const std::vector<WindowRecord> window{{1, &rec0}, {2, &rec1}};
  KernelConfig cfg;

  SECTION("P = all usable points returns the full index set") {
    const int total = static_cast<int>(rec0.usable() + rec1.usable());
    const auto idx = nearest_data_indices(rec0.states[3], window, total, cfg.scaling);
    CHECK(static_cast<int>(idx.size()) == total);
  }

  SECTION("position states do not influence the Table-I metric") {
    VehicleState a = rec0.states[10];
    VehicleState b = a;
    b.s += 100.0;
    b.ey = 0.3;
    b.epsi = -0.4;
    CHECK(nearest_data_indices(a, window, 30, cfg.scaling) ==
          nearest_data_indices(b, window, 30, cfg.scaling));
  }

  SECTION("matches the exhaustive sort oracle") {
    for (int trial = 0; trial < 40; ++trial) {
      const VehicleState q = rec1.states[trial % rec1.size()];
      const int P = 10 + trial;
      CHECK(nearest_data_indices(q, window, P, cfg.scaling) ==
            test::brute_knn_pairs(q, window, P, cfg.scaling));
    }
  }

  SECTION("insufficient data") {
    CHECK_THROWS_WITH(nearest_data_indices(rec0.states[0], window, 1000, cfg.scaling),
                      Catch::Matchers::ContainsSubstring("insufficient data"));
  }
}

TEST_CASE("local linear regression") {
  std::mt19937 rng(23);
  KernelConfig cfg;
  cfg.neighbors = 30;

  SECTION("recovers an exact affine map with zero ridge") {
    const Track track(test::straight_layout());
    Eigen::Matrix3d Av;
    Av << 0.95, 0.01, -0.02, 0.0, 0.8, 0.1, 0.02, -0.05, 0.85;
    Eigen::Matrix<double, 3, 2> Bv;
    Bv << 0.0, 0.12, 0.3, 0.0, 0.9, 0.0;  // columns (delta, a)
    const Eigen::Vector3d cv(0.01, -0.005, 0.002);
    const auto rec = affine_system_record(track, 0.1, 60, Av, Bv, cv, rng);
    const std::vector<WindowRecord> window{{0, &rec}};
    cfg.ridge = 0.0;

    const RegressorVector g_vx =
        local_linear_regression(rec.states[5], VelComponent::vx, window, cfg);
    CHECK(g_vx(0) == Approx(Av(0, 0)).margin(1e-10));
    CHECK(g_vx(1) == Approx(Av(0, 1)).margin(1e-10));
    CHECK(g_vx(2) == Approx(Av(0, 2)).margin(1e-10));
    CHECK(g_vx(3) == Approx(Bv(0, 1)).margin(1e-10));  // a column
    CHECK(g_vx(4) == Approx(cv(0)).margin(1e-10));

    const RegressorVector g_wz =
        local_linear_regression(rec.states[5], VelComponent::wz, window, cfg);
    CHECK(g_wz(3) == Approx(Bv(2, 0)).margin(1e-10));  // delta column
  }

  SECTION("matches the SVD-based weighted least squares oracle") {
    const auto rec0 = noisy_driving_record(rng, 60);
    const auto rec1 = noisy_driving_record(rng, 50);
    const std::vector<WindowRecord> window{{0, &rec0}, {1, &rec1}};
    cfg.neighbors = 40;
    cfg.ridge = 1e-9;
    for (int trial = 0; trial < 20; ++trial) {
      const VehicleState q = rec0.states[3 * trial % rec0.size()];
      for (const VelComponent comp :
           {VelComponent::vx, VelComponent::vy, VelComponent::wz}) {
        const RegressorVector got = local_linear_regression(q, comp, window, cfg);

        const auto pairs = test::brute_knn_pairs(q, window, cfg.neighbors, cfg.scaling);
        Eigen::MatrixXd features(pairs.size(), 5);
        Eigen::VectorXd targets(pairs.size());
        Eigen::VectorXd weights(pairs.size());
        for (std::size_t i = 0; i < pairs.size(); ++i) {
          const IterationRecord& rec = pairs[i].first == 0 ? rec0 : rec1;
          const VehicleState& xs = rec.states[pairs[i].second];
          const ControlInput& us = rec.inputs[pairs[i].second];
          const double input = comp == VelComponent::vx ? us.a : us.delta;
          features.row(i) << xs.vx, xs.vy, xs.wz, input, 1.0;
          const Vec6 diff = cfg.scaling.cwiseProduct(xs.to_vec() - q.to_vec());
          weights(i) = epanechnikov(diff.squaredNorm() / cfg.bandwidth);
          const VehicleState& nx = rec.states[pairs[i].second + 1];
          targets(i) = comp == VelComponent::vx ? nx.vx
                       : comp == VelComponent::vy ? nx.vy
                                                  : nx.wz;
        }
        const Eigen::VectorXd expect =
            test::wls_svd_oracle(features, targets, weights, cfg.ridge);
        CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-8);
      }
    }
  }

  SECTION("constant targets with ridge stay within the shrinkage bound") {
    auto rec = noisy_driving_record(rng, 50);
    const double c = 1.7;
    for (auto& x : rec.states) x.wz = c;  // every target w_z' equals c
    const std::vector<WindowRecord> window{{0, &rec}};
    cfg.neighbors = 30;
    cfg.ridge = 1e-6;
    const VehicleState q = rec.states[10];
    const RegressorVector got =
        local_linear_regression(q, VelComponent::wz, window, cfg);

    // (G + eps I)(got - e5 c) = -eps e5 c for the exact-fit solution e5 c,
    // so the deviation is bounded by eps |c| / lambda_min(G + eps I)
    const auto pairs = test::brute_knn_pairs(q, window, cfg.neighbors, cfg.scaling);
    Mat5 gram = Mat5::Zero();
    for (const auto& [iter, t] : pairs) {
      const Vec6 diff = cfg.scaling.cwiseProduct(rec.states[t].to_vec() - q.to_vec());
      const double w = epanechnikov(diff.squaredNorm() / cfg.bandwidth);
      Vec5 f;
      f << rec.states[t].vx, rec.states[t].vy, rec.states[t].wz,
          rec.inputs[t].delta, 1.0;
      gram += w * f * f.transpose();
    }
    gram.diagonal().array() += cfg.ridge;
    const double lam_min =
        Eigen::SelfAdjointEigenSolver<Mat5>(gram).eigenvalues().minCoeff();
    Vec5 exact = Vec5::Zero();
    exact(4) = c;
    const double bound = cfg.ridge * std::abs(c) / lam_min;
    CHECK((got - exact).norm() <= bound * (1.0 + 1e-9));
  }

  SECTION("rank-deficient data without ridge is an error") {
    auto rec = noisy_driving_record(rng, 40);
    for (auto& x : rec.states) {
      x.vx = 1.0;  // collinear with the constant feature
    }
    const std::vector<WindowRecord> window{{0, &rec}};
    cfg.ridge = 0.0;
    cfg.neighbors = 20;
    CHECK_THROWS_WITH(
        local_linear_regression(rec.states[5], VelComponent::vy, window, cfg),
        Catch::Matchers::ContainsSubstring("singular regression"));
  }

  SECTION("optimality certificate: normal-equation residual is tiny") {
    const auto rec = noisy_driving_record(rng, 60);
    const std::vector<WindowRecord> window{{0, &rec}};
    cfg.neighbors = 30;
    cfg.ridge = 1e-9;
    const VehicleState q = rec.states[20];
    const RegressorVector got =
        local_linear_regression(q, VelComponent::vy, window, cfg);
    Mat5 gram = Mat5::Zero();
    Vec5 rhs = Vec5::Zero();
    for (const auto& [iter, t] :
         test::brute_knn_pairs(q, window, cfg.neighbors, cfg.scaling)) {
      const Vec6 diff = cfg.scaling.cwiseProduct(rec.states[t].to_vec() - q.to_vec());
      const double w = epanechnikov(diff.squaredNorm() / cfg.bandwidth);
      Vec5 f;
      f << rec.states[t].vx, rec.states[t].vy, rec.states[t].wz,
          rec.inputs[t].delta, 1.0;
      gram += w * f * f.transpose();
      rhs += w * f * rec.states[t + 1].vy;
    }
    gram.diagonal().array() += cfg.ridge;
    CHECK((gram * got - rhs).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("kinematic step and jacobians") {
  const double dt = 0.1;

  SECTION("straight-line specialization") {
    VehicleState x{2.0, 0.0, 0.3, 0.0, 1.0, 0.2};
    const auto out = kinematic_step(x, dt, 0.0);
    CHECK(out(0) == Approx(0.0 + dt * 0.3));
    CHECK(out(1) == Approx(1.0 + dt * 2.0));
    CHECK(out(2) == Approx(0.2));
  }

  SECTION("only the heading changes at standstill") {
    VehicleState x{0.0, 0.0, 0.5, 0.1, 2.0, 0.1};
    const auto out = kinematic_step(x, dt, 0.0);
    CHECK(out(0) == Approx(0.1 + dt * 0.5));
    CHECK(out(1) == Approx(2.0));
    CHECK(out(2) == Approx(0.1));
  }

  SECTION("matches the independent implementation to 1e-12") {
    std::mt19937 rng(31);
    const Track track(test::oval_layout());
    for (int i = 0; i < 1000; ++i) {
      const VehicleState x = test::random_on_track_state(rng, track);
      const double kappa = track.curvature(x.s);
      const auto got = kinematic_step(x, dt, kappa);
      const auto expect = test::kinematics_by_hand(x, dt, kappa);
      CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SECTION("off-track singularity") {
    VehicleState x{1.0, 0.0, 0.0, 0.0, 0.0, 1.2};
    CHECK_THROWS_WITH(kinematic_step(x, dt, 1.0),
                      Catch::Matchers::ContainsSubstring("off-track singularity"));
  }

  SECTION("derivative spot checks") {
    VehicleState x{1.7, 0.0, 0.4, 0.0, 3.0, 0.1};
    const auto jac = kinematic_jacobians(x, dt, 0.0);
    CHECK(jac(1, 0) == Approx(dt));          // ds'/dvx on a straight
    CHECK(jac(2, 3) == Approx(dt * x.vx));   // dey'/depsi at epsi = 0
  }

  SECTION("jacobians match central finite differences") {
    std::mt19937 rng(37);
    const Track track(test::oval_layout());
    int checked = 0;
    for (int i = 0; i < 100; ++i) {
      const VehicleState x = test::random_on_track_state(rng, track);
      const double kappa = track.curvature(x.s);
      const auto jac = kinematic_jacobians(x, dt, kappa);
      const double h = 1e-6;
      for (int c = 0; c < 6; ++c) {
        Vec6 hi = x.to_vec(), lo = x.to_vec();
        hi(c) += h;
        lo(c) -= h;
        const auto fhi = kinematic_step(VehicleState::from_vec(hi), dt, kappa);
        const auto flo = kinematic_step(VehicleState::from_vec(lo), dt, kappa);
        const Eigen::Vector3d fd = (fhi - flo) / (2.0 * h);
        for (int r = 0; r < 3; ++r) {
          const double rel = std::abs(jac(r, c) - fd(r)) /
                             std::max(1.0, std::abs(fd(r)));
          CHECK(rel < 1e-5);
          ++checked;
        }
      }
    }
    REQUIRE(checked == 100 * 18);
  }
}

TEST_CASE("ATV model assembly") {
  std::mt19937 rng(41);
  const Track track(test::oval_layout());
  const double dt = 0.1;
  KernelConfig cfg;
  cfg.neighbors = 30;

  Eigen::Matrix3d Av;
  Av << 0.96, 0.0, 0.0, 0.0, 0.85, 0.05, 0.0, -0.04, 0.9;
  Eigen::Matrix<double, 3, 2> Bv;
  Bv << 0.0, 0.1, 0.25, 0.0, 0.8, 0.0;
  const Eigen::Vector3d cv(0.02, 0.0, 0.001);
  const auto rec = affine_system_record(track, dt, 80, Av, Bv, cv, rng);
  const std::vector<WindowRecord> window{{0, &rec}};

  const std::vector<VehicleState> candidate(rec.states.begin() + 10,
                                            rec.states.begin() + 23);
  const AtvModel model = build_atv_model(candidate, window, cfg, track, dt);
  REQUIRE(model.horizon() == 12);

  SECTION("input rows follow the published structure") {
    for (int k = 0; k < model.horizon(); ++k) {
      CHECK(model.B[k].bottomRows(3).cwiseAbs().maxCoeff() == 0.0);
      CHECK(model.B[k](0, 0) == 0.0);  // delta does not drive v_x
      CHECK(model.B[k](1, 1) == 0.0);  // a does not drive v_y / w_z
      CHECK(model.B[k](2, 1) == 0.0);
      CHECK(model.A[k].topRightCorner(3, 3).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  SECTION("position rows reproduce the kinematic map at the candidate") {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < model.horizon(); ++k) {
      const Vec2 any_u(0.3 * u(rng), u(rng));
      const Vec6 pred = model.A[k] * candidate[k].to_vec() + model.B[k] * any_u +
                        model.C[k];
      const auto expect = kinematic_step(candidate[k], dt, track);
      CHECK((pred.tail<3>() - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SECTION("an affine system is its own linearization") {
    for (int k = 0; k < model.horizon(); ++k) {
      const int t = 10 + k;
      const Vec6 pred = model.A[k] * rec.states[t].to_vec() +
                        model.B[k] * rec.inputs[t].to_vec() + model.C[k];
      CHECK((pred - rec.states[t + 1].to_vec()).cwiseAbs().maxCoeff() < 1e-8);
    }
  }

  SECTION("matches per-component regressions") {
    const RegressorVector g_vy =
        local_linear_regression(candidate[0], VelComponent::vy, window, cfg);
    CHECK(model.A[0](1, 0) == Approx(g_vy(0)).margin(1e-14));
    CHECK(model.B[0](1, 0) == Approx(g_vy(3)).margin(1e-14));
    CHECK(model.C[0](1) == Approx(g_vy(4)).margin(1e-14));
  }
}
