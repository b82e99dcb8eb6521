#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cthmm/core_model.hpp"
#include "cthmm/emission.hpp"
#include "cthmm/execution.hpp"
#include "cthmm/matexp.hpp"

namespace cthmm {

// Pairwise endpoint posteriors summed over all intervals of equal length.
// Column j of `mass` holds the N x N sum for dts[j], stored column-major.
struct EndpointPosteriors {
  int n_states = 0;
  std::vector<double> dts;
  Eigen::MatrixXd mass;

  Eigen::Map<const Eigen::MatrixXd> at(std::size_t j) const {
    return {mass.col(static_cast<Eigen::Index>(j)).data(), n_states, n_states};
  }
};

// Expected sojourn times and jump counts under a given generator.
struct JumpStatistics {
  Eigen::VectorXd sojourn;  // R[k], years
  Eigen::MatrixXd jumps;    // N[k][l], zero diagonal
};

struct SufficientStats {
  Eigen::VectorXd sojourn;
  Eigen::MatrixXd jumps;
  Eigen::VectorXd first_obs_gamma_sum;
  long first_obs_count = 0;
  // Weighted (pattern x outcome) counts per state; the aggregated form of
  // the per-state weighted emission samples.
  std::vector<EmissionTable> emission_counts;
  EndpointPosteriors endpoints;
  double log_likelihood = 0.0;
  double total_exposure = 0.0;
};

struct FitConfig {
  int n_states = 3;
  double convergence_threshold = 0.05;
  int max_outer_iterations = 500;
  int inner_q_iterations = 1;
  int restarts = 5;
  std::uint64_t rng_seed = 1;
  double ridge = kDefaultRidge;
  Execution execution = Execution::Parallel;
};

// Throws ConfigError on non-positive settings.
void check_config(const FitConfig& config);

struct RestartDiagnostics {
  int restart_index = 0;
  bool ok = false;
  std::string message;
  double final_log_likelihood = 0.0;
  int n_iterations = 0;
  bool converged = false;
};

struct FitResult {
  ModelParameters params;  // canonically ordered
  std::vector<double> log_likelihood_trace;
  int n_iterations = 0;
  bool converged = false;
  int restart_index = 0;
  double final_delta_norm = 0.0;
  std::vector<std::string> warnings;
  std::vector<RestartDiagnostics> restarts;

  double final_log_likelihood() const {
    return log_likelihood_trace.empty() ? 0.0 : log_likelihood_trace.back();
  }
};

/// Starting values: uniform pi, beta ~ Normal(0, 1), off-diagonal Q ~ Uniform(0, 1).
ModelParameters initialize(int n_states, std::mt19937_64& rng);

// Engine for restart `restart` of a fit seeded with `seed`.
std::mt19937_64 restart_rng(std::uint64_t seed, int restart);

// Mean of gamma at each patient's first observation. Throws DataError when empty.
Eigen::VectorXd update_pi(std::span<const PosteriorSummary> posteriors);

// Sums xi by interval length.
EndpointPosteriors collect_endpoints(std::span<const PosteriorSummary> posteriors,
                                     std::span<const PatientTimeline> timelines);

/// Endpoint-conditioned expected sojourn times and jump counts:
///   E[R_k | a, b, T]  = I_kk(a, b) / P(T)(a, b)
///   E[N_kl | a, b, T] = q_kl I_kl(a, b) / P(T)(a, b)
/// with I the Van Loan integrals, each weighted by the endpoint posterior.
/// One contracted block exponential per unique interval length.
JumpStatistics expected_jump_statistics(const EndpointPosteriors& endpoints,
                                        const GeneratorMatrix& q,
                                        Execution exec = Execution::Parallel);

// Same quantities entry by entry with one van_loan_integral per (k, l) and
// endpoint pair. Slow; kept as the reference for the contracted route.
JumpStatistics expected_jump_statistics_reference(const EndpointPosteriors& endpoints,
                                                  const GeneratorMatrix& q);

SufficientStats accumulate_q_stats(std::span<const PosteriorSummary> posteriors,
                                   std::span<const PatientTimeline> timelines,
                                   const GeneratorMatrix& q_current);

struct QUpdate {
  GeneratorMatrix q;
  std::vector<int> frozen_states;  // rows kept at their previous values (R[k] = 0)
};

/// q_kl = N_kl / R_k. With inner_iterations > 1 the endpoint posteriors in
/// `stats` are re-contracted under each new generator and the ratio
/// repeated. Rows with zero expected sojourn keep their current values.
QUpdate update_q(const SufficientStats& stats, const GeneratorMatrix& q_current,
                 int inner_iterations = 1, Execution exec = Execution::Parallel);

// Interval-length index shared by every EM iteration over one cohort.
struct CohortIndex {
  std::vector<double> unique_dts;
  std::vector<std::vector<std::uint32_t>> interval_dt_index;
  double total_exposure = 0.0;
  long n_intervals = 0;
};

CohortIndex index_cohort(std::span<const PatientTimeline> timelines);

/// Fused E-step: forward-backward per patient with results folded straight
/// into sufficient statistics, so xi is never stored for the whole cohort.
/// Parallel execution splits patients into a fixed number of contiguous
/// blocks and reduces block results in order, so the output does not depend
/// on the thread count. Serial execution is the plain one-accumulator loop.
SufficientStats e_step_statistics(std::span<const PatientTimeline> timelines,
                                  const CohortIndex& index, const ModelParameters& params,
                                  const KernelCache& kernels, Execution exec);

struct MStepResult {
  ModelParameters params;
  std::vector<std::string> warnings;
};

MStepResult m_step(const SufficientStats& stats, const ModelParameters& current,
                   const FitConfig& config);

struct RunResult {
  ModelParameters params;  // in the run's own labeling
  std::vector<double> log_likelihood_trace;
  int n_iterations = 0;
  bool converged = false;
  double final_delta_norm = 0.0;
  std::vector<std::string> warnings;
};

// One EM run from given starting values. Stops when the Euclidean norm of
// the flattened parameter change drops below the threshold.
RunResult em_run(std::span<const PatientTimeline> timelines, const ModelParameters& start,
                 const FitConfig& config);

// Random restarts of em_run; the highest final log-likelihood wins and is
// returned in canonical state order. Throws NumericalError when every
// restart fails.
FitResult em_fit(std::span<const PatientTimeline> timelines, const FitConfig& config);

}  // namespace cthmm
