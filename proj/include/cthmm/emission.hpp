#pragma once

#include <array>
#include <optional>
#include <span>

#include <Eigen/Dense>

#include "cthmm/core_model.hpp"

namespace cthmm {

// (intercept, prev_is_ED, prev_is_Hosp, prev_is_Spec)
using CovariateVector = Eigen::Matrix<double, kNumCovariates, 1>;
// Over (GP, ED, Hosp, Spec).
using EventProbabilities = Eigen::Matrix<double, kNumEvents, 1>;
// Rows: previous event (GP or none, ED, Hosp, Spec). Columns: outcome event.
// Holds probabilities or weighted outcome counts depending on context.
using EmissionTable = Eigen::Matrix<double, kNumEvents, kNumEvents>;

// A missing previous event (first observation) is encoded like GP.
CovariateVector encode_covariates(std::optional<EventCode> previous);

// Row of an EmissionTable that a covariate vector selects. Throws DataError
// for vectors that are not a valid intercept + one-hot encoding.
int covariate_pattern(const CovariateVector& x);

constexpr int covariate_pattern(std::optional<EventCode> previous) {
  return previous ? event_index(*previous) : 0;
}

// Softmax over logits (0, beta_ED.x, beta_Hosp.x, beta_Spec.x).
EventProbabilities emission_probs(const StateCoefficients& beta_s, const CovariateVector& x);

// All four covariate patterns at once.
EmissionTable emission_table(const StateCoefficients& beta_s);

struct WeightedEmissionSample {
  CovariateVector covariates;
  EventCode outcome = EventCode::GP;
  double weight = 0.0;
};

struct MultinomialFit {
  StateCoefficients beta;
  bool converged = false;
  int iterations = 0;
  // Weighted log-likelihood minus (ridge / 2) * ||beta||^2 at `beta`.
  double objective = 0.0;
  // Penalized objective after each accepted Newton step, starting point first.
  std::vector<double> objective_trace;
};

inline constexpr double kDefaultRidge = 1e-8;

/// Weighted multinomial logistic regression with GP as reference outcome,
/// fit by damped Newton-Raphson on all 12 coefficients. Stops when the
/// gradient max-norm is <= 1e-8 or after 100 iterations. Each step is halved
/// until the penalized objective does not decrease, so starting from the
/// previous EM iterate never lowers it.
///
/// Throws DataError when the total weight is zero or a weight is negative.
MultinomialFit fit_weighted_multinomial(std::span<const WeightedEmissionSample> samples,
                                        double ridge = kDefaultRidge,
                                        const StateCoefficients& start = StateCoefficients::Zero());

// Same fit from pre-aggregated weighted counts (pattern x outcome).
MultinomialFit fit_weighted_multinomial(const EmissionTable& counts,
                                        double ridge = kDefaultRidge,
                                        const StateCoefficients& start = StateCoefficients::Zero());

// Weighted log-likelihood minus (ridge / 2) * ||beta||^2.
double multinomial_objective(const EmissionTable& counts, const StateCoefficients& beta,
                             double ridge);

/// Exact inverse of emission_table: intercepts are the GP-row log-odds
/// against GP, indicator coefficients are differences of row log-odds.
/// Rows need not sum to one (only ratios enter). Throws DataError on
/// non-positive or non-finite entries.
StateCoefficients log_odds_to_beta(const EmissionTable& table);

// Reference three-state emission probabilities for a COPD cohort, one table
// per state ordered by severity, as printed to two decimals. Some rows sum to
// 0.99 or 1.01 because of that rounding.
std::array<EmissionTable, 3> reference_emission_tables();

// Shifts every cell of a row by the same amount so that the row sums to one.
// For two-decimal rows off by at most 0.01 the shift is 0.0025, which keeps
// every cell rounding to its printed value.
EmissionTable balance_row_sums(const EmissionTable& table);

}  // namespace cthmm
