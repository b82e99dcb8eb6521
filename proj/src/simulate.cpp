#include "cthmm/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>

#include "cthmm/emission.hpp"
#include "cthmm/errors.hpp"

namespace cthmm {

namespace {

// Inverse-CDF draw; falls back to the last index with positive weight when
// roundoff leaves u above the cumulative sum.
template <class Weights>
int draw_index(const Weights& w, double total, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng) * total;
  double cum = 0.0;
  int last = -1;
  for (int i = 0; i < static_cast<int>(w.size()); ++i) {
    if (w[i] <= 0.0) continue;
    cum += w[i];
    last = i;
    if (u < cum) return i;
  }
  return last;
}

}  // namespace

void check_sim_config(const SimConfig& c) {
  if (c.n_patients < 1) throw ConfigError("n_patients must be >= 1");
  if (!(c.observation_rate > 0.0) || !std::isfinite(c.observation_rate)) {
    throw ConfigError("observation_rate must be > 0");
  }
  if (!(c.horizon_years > 0.0) || !std::isfinite(c.horizon_years)) {
    throw ConfigError("horizon_years must be > 0");
  }
  const auto violations = validate_parameters(c.params);
  if (!violations.empty()) throw DataError("simulation parameters invalid: " + violations.front());
}

int LatentTrajectory::state_at(double t) const {
  int s = initial_state;
  for (const Jump& j : jumps) {
    if (j.time > t) break;
    s = j.state;
  }
  return s;
}

LatentTrajectory sample_trajectory(const GeneratorMatrix& q, int initial_state, double horizon,
                                   std::mt19937_64& rng) {
  const int n = q.n_states();
  LatentTrajectory traj;
  traj.initial_state = initial_state;
  int state = initial_state;
  double t = 0.0;
  std::vector<double> w(n);
  while (true) {
    const double rate = -q(state, state);
    if (!(rate > 0.0)) break;  // absorbing
    t += std::exponential_distribution<double>(rate)(rng);
    if (t > horizon) break;
    for (int l = 0; l < n; ++l) w[l] = (l == state) ? 0.0 : q(state, l);
    state = draw_index(w, rate, rng);
    traj.jumps.push_back({t, state});
  }
  return traj;
}

LatentTrajectory sample_trajectory(const ModelParameters& params, double horizon,
                                   std::mt19937_64& rng) {
  const int initial = draw_index(params.pi, params.pi.sum(), rng);
  return sample_trajectory(params.q, initial, horizon, rng);
}

SimulatedPatient sample_timeline(const SimConfig& config, std::mt19937_64& rng,
                                 std::string patient_id) {
  std::vector<EmissionTable> tables;
  for (const auto& b : config.params.beta) tables.push_back(emission_table(b));
  std::exponential_distribution<double> gap(config.observation_rate);

  SimulatedPatient out;
  out.timeline.patient_id = std::move(patient_id);
  while (true) {
    out.trajectory = sample_trajectory(config.params, config.horizon_years, rng);
    out.days.clear();
    if (config.include_t0_observation) out.days.push_back(0);
    for (double t = gap(rng); t <= config.horizon_years; t += gap(rng)) {
      out.days.push_back(static_cast<long>(std::floor(t * kDaysPerYear)));
    }
    out.days.erase(std::unique(out.days.begin(), out.days.end()), out.days.end());
    if (!out.days.empty()) break;
  }

  out.timeline.observations.clear();
  out.hidden_states.clear();
  std::optional<EventCode> prev;
  for (long day : out.days) {
    const double time = static_cast<double>(day) / kDaysPerYear;
    const int state = out.trajectory.state_at(time);
    const auto row = tables[state].row(covariate_pattern(prev));
    const auto event = static_cast<EventCode>(draw_index(row, row.sum(), rng));
    out.timeline.observations.push_back({time, event});
    out.hidden_states.push_back(state);
    prev = event;
  }
  return out;
}

std::mt19937_64 patient_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x53494du};
  return std::mt19937_64(seq);
}

std::vector<SimulatedPatient> simulate_cohort(const SimConfig& config, Execution exec) {
  check_sim_config(config);
  std::vector<SimulatedPatient> out(config.n_patients);
  auto one = [&](long i) {
    char id[32];
    std::snprintf(id, sizeof id, "P%06ld", i + 1);
    auto rng = patient_rng(config.rng_seed, static_cast<std::uint64_t>(i));
    out[i] = sample_timeline(config, rng, id);
  };
  const long count = config.n_patients;
  if (exec == Execution::Parallel) {
#pragma omp parallel for schedule(dynamic, 16)
    for (long i = 0; i < count; ++i) one(i);
  } else {
    for (long i = 0; i < count; ++i) one(i);
  }
  return out;
}

std::vector<PatientTimeline> timelines_of(const std::vector<SimulatedPatient>& patients) {
  std::vector<PatientTimeline> out;
  out.reserve(patients.size());
  for (const auto& p : patients) out.push_back(p.timeline);
  return out;
}

}  // namespace cthmm
