#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "lmpc/safe_set.hpp"
#include "lmpc/trajectory_store.hpp"

using namespace lmpc;

namespace {

// straight-line toy lap: s advances 1 m per step until it crosses L
IterationRecord toy_lap(double track_length, int steps, double v = 1.0) {
  std::vector<VehicleState> xs;
  std::vector<ControlInput> us;
  for (int t = 0; t <= steps; ++t) {
    VehicleState x;
    x.vx = v;
    x.s = t * (track_length / (steps - 0.5));  // crosses L on the last step
    xs.push_back(x);
    us.push_back(ControlInput{0.0, 0.1 * t});
  }
  return finalize_iteration(xs, us, track_length);
}

}  // namespace

TEST_CASE("finalize_iteration computes the cost-to-go") {
  const auto rec = toy_lap(10.0, 50);
  REQUIRE(rec.duration == 50);
  CHECK(rec.cost_to_go[20] == 30);
  CHECK(rec.cost_to_go[50] == 0);
  CHECK(rec.states.size() == 51);
  CHECK(rec.inputs.size() == 51);

  const auto three = toy_lap(3.0, 3);
  CHECK(three.cost_to_go == std::vector<int>{3, 2, 1, 0});

  SECTION("cost decreases by exactly one per step") {
    for (std::size_t t = 0; t + 1 < rec.cost_to_go.size(); ++t)
      CHECK(rec.cost_to_go[t] - rec.cost_to_go[t + 1] == 1);
  }
}

TEST_CASE("finalize_iteration rejects bad laps") {
  std::vector<VehicleState> xs(5);
  std::vector<ControlInput> us(5);
  for (int t = 0; t < 5; ++t) xs[t].s = t;  // never crosses L = 10
  CHECK_THROWS_WITH(finalize_iteration(xs, us, 10.0),
                    Catch::Matchers::ContainsSubstring("incomplete"));

  xs[4].s = 11.0;
  xs[2].s = 3.5;
  xs[3].s = 3.0;  // not increasing
  CHECK_THROWS_WITH(finalize_iteration(xs, us, 10.0),
                    Catch::Matchers::ContainsSubstring("increasing"));

  CHECK_THROWS_AS(finalize_iteration(xs, std::vector<ControlInput>(3), 10.0),
                  std::invalid_argument);
}

TEST_CASE("extended records continue the cost past the finish line") {
  const double L = 10.0;
  const auto lap0 = toy_lap(L, 10);
  auto lap1 = toy_lap(L, 10);
  const auto ext = extend_record(lap0, lap1, L);

  REQUIRE(ext.size() == lap0.size() + lap1.size() - 1);
  CHECK(ext.cost_to_go[lap0.duration] == 0);
  CHECK(ext.cost_to_go[lap0.duration + 1] == -1);
  for (std::size_t t = lap0.size(); t < ext.size(); ++t) {
    CHECK(ext.states[t].s >= L);
    CHECK(ext.cost_to_go[t] == -static_cast<int>(t - lap0.duration));
  }

  SECTION("s stays strictly increasing across the line") {
    for (std::size_t t = 0; t + 1 < ext.size(); ++t)
      CHECK(ext.states[t].s < ext.states[t + 1].s);
  }

  SECTION("KNN near the line returns neighbors spanning it") {
    VehicleState query;
    query.s = L - 0.2;
    const auto idx = nearest_time_indices(ext, query, 6, s_only_metric(),
                                          static_cast<int>(ext.usable()));
    // brute force over usable indices
    std::vector<std::pair<double, int>> dist;
    for (std::size_t t = 0; t < ext.usable(); ++t)
      dist.emplace_back(std::abs(ext.states[t].s - query.s), static_cast<int>(t));
    std::sort(dist.begin(), dist.end());
    std::vector<int> expected;
    for (int i = 0; i < 6; ++i) expected.push_back(dist[i].second);
    std::sort(expected.begin(), expected.end());
    CHECK(idx == expected);
    bool spans = false;
    for (int t : idx) spans |= ext.states[t].s >= L;
    CHECK(spans);
  }

  SECTION("missing successor lap") {
    CHECK_THROWS_WITH(extend_record(lap0, std::vector<VehicleState>{},
                                    std::vector<ControlInput>{}, L),
                      Catch::Matchers::ContainsSubstring("successor lap missing"));
  }
}

TEST_CASE("records survive a save/load round trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "lmpc_store_test";
  fs::create_directories(dir);
  const auto path = (dir / "session.jsonl").string();

  std::vector<IterationRecord> recs{toy_lap(10.0, 12, 1.37), toy_lap(10.0, 9, 2.0)};
  recs[0].states[3].ey = 0.123456789012345678;
  recs[0].states[3].epsi = -1e-17;
  save_records(recs, path);
  const auto loaded = load_records(path);

  REQUIRE(loaded.size() == recs.size());
  for (std::size_t j = 0; j < recs.size(); ++j) {
    REQUIRE(loaded[j].size() == recs[j].size());
    CHECK(loaded[j].duration == recs[j].duration);
    CHECK(loaded[j].cost_to_go == recs[j].cost_to_go);
    for (std::size_t t = 0; t < recs[j].size(); ++t) {
      CHECK((loaded[j].states[t].to_vec() - recs[j].states[t].to_vec())
                .cwiseAbs()
                .maxCoeff() == 0.0);
      CHECK((loaded[j].inputs[t].to_vec() - recs[j].inputs[t].to_vec())
                .cwiseAbs()
                .maxCoeff() == 0.0);
    }
  }

  SECTION("empty list round trips") {
    save_records({}, path);
    CHECK(load_records(path).empty());
  }

  SECTION("diagnostics lines are skipped") {
    std::ofstream out(path);
    out << detail::record_to_json(recs[0]) << "\n";
    out << R"({"type":"diagnostics","lap":0,"steps":[]})" << "\n";
    out.close();
    CHECK(load_records(path).size() == 1);
  }

  SECTION("malformed line reports its location") {
    std::ofstream out(path);
    out << detail::record_to_json(recs[0]) << "\n";
    out << "{not json}\n";
    out.close();
    CHECK_THROWS_WITH(load_records(path),
                      Catch::Matchers::ContainsSubstring(":2"));
  }

  fs::remove_all(dir);
}
