#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cthmm/core_model.hpp"
#include "cthmm/execution.hpp"

namespace cthmm {

inline constexpr double kDaysPerYear = 365.25;

struct SimConfig {
  ModelParameters params;
  int n_patients = 1;
  double observation_rate = 3.0;  // expected observations per year
  double horizon_years = 5.0;
  std::uint64_t rng_seed = 1;
  bool include_t0_observation = true;
};

// Throws ConfigError on invalid settings.
void check_sim_config(const SimConfig& config);

struct Jump {
  double time = 0.0;
  int state = 0;
};

struct LatentTrajectory {
  int initial_state = 0;
  std::vector<Jump> jumps;

  int state_at(double t) const;
};

// Jump chain / holding time sampler truncated at `horizon`.
LatentTrajectory sample_trajectory(const GeneratorMatrix& q, int initial_state,
                                   double horizon, std::mt19937_64& rng);

// Initial state drawn from params.pi.
LatentTrajectory sample_trajectory(const ModelParameters& params, double horizon,
                                   std::mt19937_64& rng);

struct SimulatedPatient {
  PatientTimeline timeline;
  std::vector<long> days;           // observation day indices, aligned with timeline
  std::vector<int> hidden_states;   // latent state at each observation
  LatentTrajectory trajectory;
};

/// Observation days from a Poisson process on (0, horizon] (plus day 0 when
/// requested), floored to whole days with duplicates dropped so that the
/// timeline matches its CSV form exactly. Events follow the emission model
/// given the latent state and the previously sampled event.
SimulatedPatient sample_timeline(const SimConfig& config, std::mt19937_64& rng,
                                 std::string patient_id);

// Engine for patient `index`, derived from the master seed.
std::mt19937_64 patient_rng(std::uint64_t seed, std::uint64_t index);

// Patients get ids P000001, P000002, ... and independent engines, so the
// result is the same for serial and parallel execution.
std::vector<SimulatedPatient> simulate_cohort(const SimConfig& config,
                                              Execution exec = Execution::Parallel);

std::vector<PatientTimeline> timelines_of(const std::vector<SimulatedPatient>& patients);

}  // namespace cthmm
