#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cthmm/core_model.hpp"
#include "cthmm/execution.hpp"
#include "cthmm/matexp.hpp"

namespace cthmm {

// Interval lengths t[i+1] - t[i]. Every kernel lookup keys on these exact values.
std::vector<double> interval_lengths(const PatientTimeline& timeline);

// Sorted unique interval lengths across a cohort.
std::vector<double> unique_interval_lengths(std::span<const PatientTimeline> timelines);

// n_states x n_observations matrix of P(event_t | state, previous event).
Eigen::MatrixXd emission_likelihoods(const PatientTimeline& timeline,
                                     const ModelParameters& params);

/// Scaled forward-backward over irregular intervals. Alpha is normalized at
/// every step and the log normalizers sum to the exact log-likelihood.
/// `kernels` must contain every interval length of the timeline.
PosteriorSummary forward_backward(const PatientTimeline& timeline,
                                  const ModelParameters& params,
                                  const KernelCache& kernels);

PosteriorSummary forward_backward(const PatientTimeline& timeline,
                                  const ModelParameters& params);

// Log-likelihood from an independently scaled backward recursion. Agrees with
// forward_backward's value up to roundoff; kept as a consistency check.
double backward_log_likelihood(const PatientTimeline& timeline,
                               const ModelParameters& params);

struct CohortPosteriors {
  std::vector<PosteriorSummary> posteriors;
  double log_likelihood = 0.0;
};

// forward_backward for every patient, sharing one kernel cache populated
// before the sweep. Errors are rethrown as DataError/NumericalError prefixed
// with the patient id.
CohortPosteriors cohort_e_step(std::span<const PatientTimeline> timelines,
                               const ModelParameters& params,
                               Execution exec = Execution::Parallel);

struct DecodedObservation {
  double time = 0.0;
  EventCode event = EventCode::GP;
  Eigen::VectorXd gamma;
  int argmax_state = 0;  // zero-based
};

struct DecodedTimeline {
  std::string patient_id;
  std::vector<DecodedObservation> observations;
};

// Posterior-marginal decoding: argmax of gamma per observation, ties toward
// the lower state index.
DecodedTimeline decode(const PatientTimeline& timeline, const ModelParameters& params);

struct OccupancyTable {
  std::vector<double> times;
  std::vector<Eigen::MatrixXd> probs;  // probs[i] = exp(Q times[i]); row = start state
};

// Grid 0, step, 2 step, ... up to horizon (horizon itself is always included).
// Throws DataError unless 0 < grid_step <= horizon.
OccupancyTable state_occupancy(const GeneratorMatrix& q, double horizon, double grid_step);

}  // namespace cthmm
