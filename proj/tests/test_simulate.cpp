#include <array>
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "cthmm/emission.hpp"
#include "cthmm/errors.hpp"
#include "cthmm/simulate.hpp"

using namespace cthmm;

namespace {

GeneratorMatrix two_state() {
  Eigen::MatrixXd q(2, 2);
  q << -1.0, 1.0, 0.5, -0.5;
  return GeneratorMatrix::from_off_diagonal(q);
}

// Fixture parameters with the chain frozen in `state`.
ModelParameters pinned(int state) {
  auto p = test::fixture_parameters();
  p.q = GeneratorMatrix::zero(3);
  p.pi = Eigen::Vector3d::Zero();
  p.pi(state) = 1.0;
  return p;
}

}  // namespace

TEST_CASE("sample_trajectory") {
  std::mt19937_64 rng(9);
  SUBCASE("zero generator never jumps") {
    const auto t = sample_trajectory(GeneratorMatrix::zero(3), 2, 1e6, rng);
    CHECK(t.jumps.empty());
    CHECK(t.state_at(5e5) == 2);
  }
  SUBCASE("long-run fraction of time in state 1 is 1/3") {
    const double horizon = 1e4;
    const auto t = sample_trajectory(two_state(), 0, horizon, rng);
    double in_first = 0.0, last = 0.0;
    int state = t.initial_state;
    for (const Jump& j : t.jumps) {
      if (state == 0) in_first += j.time - last;
      last = j.time;
      state = j.state;
    }
    if (state == 0) in_first += horizon - last;
    CHECK(std::abs(in_first / horizon - 1.0 / 3.0) <= 0.02);
  }
  SUBCASE("mean holding times match the exit rates") {
    const auto q = GeneratorMatrix::from_off_diagonal(test::fixture_generator());
    std::array<double, 3> total{};
    std::array<long, 3> visits{};
    int state = 0;
    while (*std::min_element(visits.begin(), visits.end()) < 100000) {
      // Chunks of one long path; the visit cut off at the chunk end is dropped.
      const auto t = sample_trajectory(q, state, 1e5, rng);
      double start = 0.0;
      for (const Jump& j : t.jumps) {
        total[state] += j.time - start;
        ++visits[state];
        start = j.time;
        state = j.state;
      }
    }
    for (int k = 0; k < 3; ++k) {
      const double expected = 1.0 / -q(k, k);
      CHECK(std::abs(total[k] / visits[k] - expected) <= 0.01 * expected);
    }
  }
  SUBCASE("jump times increase and states change at every jump") {
    const auto q = GeneratorMatrix::from_off_diagonal(test::fixture_generator());
    for (int i = 0; i < 200; ++i) {
      const auto t = sample_trajectory(q, i % 3, 50.0, rng);
      int prev = t.initial_state;
      double prev_time = 0.0;
      for (const Jump& j : t.jumps) {
        CHECK(j.time > prev_time);
        CHECK(j.time <= 50.0);
        CHECK(j.state != prev);
        prev = j.state;
        prev_time = j.time;
      }
    }
  }
}

TEST_CASE("sample_timeline") {
  SUBCASE("degenerate GP-only emissions") {
    SimConfig c;
    c.params = pinned(0);
    EmissionTable gp_only = EmissionTable::Constant(1e-12);
    gp_only.col(0).setConstant(1.0 - 3e-12);
    for (auto& b : c.params.beta) b = log_odds_to_beta(gp_only);
    c.observation_rate = 300.0;
    auto rng = patient_rng(1, 0);
    const auto p = sample_timeline(c, rng, "x");
    CHECK(p.timeline.observations.size() > 1000);
    for (const auto& o : p.timeline.observations) CHECK(o.event == EventCode::GP);
  }
  SUBCASE("timeline invariants and day quantization") {
    SimConfig c;
    c.params = test::fixture_parameters();
    for (std::uint64_t i = 0; i < 300; ++i) {
      auto rng = patient_rng(4, i);
      const auto p = sample_timeline(c, rng, "x");
      CHECK_NOTHROW(check_timeline(p.timeline));
      REQUIRE(p.days.size() == p.timeline.observations.size());
      CHECK(p.days.front() == 0);
      for (std::size_t k = 0; k < p.days.size(); ++k) {
        CHECK(p.timeline.observations[k].time == p.days[k] / kDaysPerYear);
        CHECK(p.hidden_states[k] == p.trajectory.state_at(p.timeline.observations[k].time));
      }
    }
  }
  SUBCASE("without the index observation no timeline is empty") {
    SimConfig c;
    c.params = test::fixture_parameters();
    c.include_t0_observation = false;
    c.observation_rate = 0.05;
    c.horizon_years = 1.0;
    for (std::uint64_t i = 0; i < 200; ++i) {
      auto rng = patient_rng(8, i);
      CHECK(!sample_timeline(c, rng, "x").timeline.observations.empty());
    }
  }
  SUBCASE("observation count is one plus rate times horizon") {
    SimConfig c;
    c.params = test::fixture_parameters();
    c.n_patients = 10000;
    c.rng_seed = 31;
    const auto cohort = simulate_cohort(c);
    double total = 0.0;
    for (const auto& p : cohort) total += static_cast<double>(p.timeline.observations.size());
    const double expected = 1.0 + c.observation_rate * c.horizon_years;
    CHECK(std::abs(total / c.n_patients - expected) <= 0.02 * expected);
  }
  SUBCASE("event frequencies by state and previous event follow the emission tables") {
    for (int state = 0; state < 3; ++state) {
      SimConfig c;
      c.params = pinned(state);
      c.observation_rate = 300.0;
      c.horizon_years = 60.0;
      const EmissionTable expected = emission_table(c.params.beta[state]);
      EmissionTable counts = EmissionTable::Zero();
      for (std::uint64_t i = 0; counts.rowwise().sum().minCoeff() < 1e5; ++i) {
        REQUIRE(i < 5000);
        auto rng = patient_rng(77 + state, i);
        const auto p = sample_timeline(c, rng, "x");
        std::optional<EventCode> prev;
        for (const auto& o : p.timeline.observations) {
          counts(covariate_pattern(prev), event_index(o.event)) += 1.0;
          prev = o.event;
        }
      }
      const EmissionTable freq = counts.array().colwise() / counts.rowwise().sum().array();
      CHECK((freq - expected).cwiseAbs().maxCoeff() <= 0.005);
    }
  }
  SUBCASE("state at the first observation follows pi") {
    SimConfig c;
    c.params = test::fixture_parameters();
    c.n_patients = 20000;
    const auto cohort = simulate_cohort(c);
    Eigen::Vector3d freq = Eigen::Vector3d::Zero();
    for (const auto& p : cohort) freq(p.hidden_states.front()) += 1.0;
    freq /= c.n_patients;
    for (int k = 0; k < 3; ++k) {
      const double se = std::sqrt(c.params.pi(k) * (1 - c.params.pi(k)) / c.n_patients);
      CHECK(std::abs(freq(k) - c.params.pi(k)) <= 4.0 * se);
    }
  }
}

TEST_CASE("simulate_cohort") {
  SimConfig c;
  c.params = test::fixture_parameters();
  c.n_patients = 500;
  c.rng_seed = 12;
  const auto a = simulate_cohort(c, Execution::Serial);
  const auto b = simulate_cohort(c, Execution::Parallel);
  REQUIRE(a.size() == 500);
  CHECK(a.front().timeline.patient_id == "P000001");
  CHECK(a.back().timeline.patient_id == "P000500");
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same &= a[i].days == b[i].days && a[i].hidden_states == b[i].hidden_states;
    for (std::size_t k = 0; k < a[i].days.size(); ++k) {
      same &= a[i].timeline.observations[k].event == b[i].timeline.observations[k].event;
    }
  }
  CHECK(same);
  c.rng_seed = 13;
  const auto d = simulate_cohort(c, Execution::Serial);
  CHECK(d.front().days != a.front().days);

  SimConfig bad = c;
  bad.n_patients = 0;
  CHECK_THROWS_AS(simulate_cohort(bad), ConfigError);
  bad = c;
  bad.observation_rate = -1;
  CHECK_THROWS_AS(simulate_cohort(bad), ConfigError);
  bad = c;
  bad.params.pi(0) = -0.5;
  CHECK_THROWS_AS(simulate_cohort(bad), DataError);
}
