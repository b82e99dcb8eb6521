#include "cthmm/emission.hpp"

#include <cmath>
#include <string>

#include "cthmm/errors.hpp"

namespace cthmm {

namespace {

constexpr int kNumCoefficients = kNumLogits * kNumCovariates;
constexpr int kMaxNewtonIterations = 100;
constexpr double kGradientTolerance = 1e-8;

using CoefficientVector = Eigen::Matrix<double, kNumCoefficients, 1>;
using CoefficientHessian = Eigen::Matrix<double, kNumCoefficients, kNumCoefficients>;

// Row-major flattening: index = logit * kNumCovariates + covariate.
CoefficientVector flatten(const StateCoefficients& beta) {
  CoefficientVector v;
  for (int j = 0; j < kNumLogits; ++j) {
    for (int c = 0; c < kNumCovariates; ++c) v(j * kNumCovariates + c) = beta(j, c);
  }
  return v;
}

StateCoefficients unflatten(const CoefficientVector& v) {
  StateCoefficients beta;
  for (int j = 0; j < kNumLogits; ++j) {
    for (int c = 0; c < kNumCovariates; ++c) beta(j, c) = v(j * kNumCovariates + c);
  }
  return beta;
}

CovariateVector pattern_covariates(int pattern) {
  CovariateVector x = CovariateVector::Zero();
  x(0) = 1.0;
  if (pattern > 0) x(pattern) = 1.0;
  return x;
}

// Log of the softmax over (0, beta x).
EventProbabilities log_probs(const StateCoefficients& beta_s, const CovariateVector& x) {
  EventProbabilities eta;
  eta(0) = 0.0;
  eta.tail<kNumLogits>() = beta_s * x;
  const double top = eta.maxCoeff();
  const double lse = top + std::log((eta.array() - top).exp().sum());
  return eta.array() - lse;
}

}  // namespace

CovariateVector encode_covariates(std::optional<EventCode> previous) {
  return pattern_covariates(covariate_pattern(previous));
}

int covariate_pattern(const CovariateVector& x) {
  if (x(0) != 1.0) throw DataError("covariate vector must start with intercept 1");
  int pattern = 0;
  for (int c = 1; c < kNumCovariates; ++c) {
    if (x(c) == 1.0) {
      if (pattern != 0) throw DataError("covariate vector has more than one indicator set");
      pattern = c;
    } else if (x(c) != 0.0) {
      throw DataError("covariate indicators must be 0 or 1");
    }
  }
  return pattern;
}

EventProbabilities emission_probs(const StateCoefficients& beta_s, const CovariateVector& x) {
  EventProbabilities eta;
  eta(0) = 0.0;
  eta.tail<kNumLogits>() = beta_s * x;
  const EventProbabilities e = (eta.array() - eta.maxCoeff()).exp();
  return e / e.sum();
}

EmissionTable emission_table(const StateCoefficients& beta_s) {
  EmissionTable t;
  for (int p = 0; p < kNumEvents; ++p) {
    t.row(p) = emission_probs(beta_s, pattern_covariates(p)).transpose();
  }
  return t;
}

double multinomial_objective(const EmissionTable& counts, const StateCoefficients& beta,
                             double ridge) {
  double ll = 0.0;
  for (int p = 0; p < kNumEvents; ++p) {
    const EventProbabilities lp = log_probs(beta, pattern_covariates(p));
    for (int o = 0; o < kNumEvents; ++o) {
      if (counts(p, o) != 0.0) ll += counts(p, o) * lp(o);
    }
  }
  return ll - 0.5 * ridge * beta.squaredNorm();
}

MultinomialFit fit_weighted_multinomial(const EmissionTable& counts, double ridge,
                                        const StateCoefficients& start) {
  if (!counts.allFinite() || (counts.array() < 0.0).any()) {
    throw DataError("fit_weighted_multinomial: weights must be finite and nonnegative");
  }
  if (!(counts.sum() > 0.0)) {
    throw DataError("fit_weighted_multinomial: total weight is zero");
  }
  if (!(ridge >= 0.0)) throw DataError("fit_weighted_multinomial: ridge must be >= 0");

  MultinomialFit fit;
  CoefficientVector theta = flatten(start);
  double objective = multinomial_objective(counts, start, ridge);
  fit.objective_trace.push_back(objective);

  for (int iter = 0; iter < kMaxNewtonIterations; ++iter) {
    CoefficientVector grad = -ridge * theta;
    CoefficientHessian info = ridge * CoefficientHessian::Identity();  // negative Hessian
    const StateCoefficients beta = unflatten(theta);
    for (int p = 0; p < kNumEvents; ++p) {
      const double n_p = counts.row(p).sum();
      if (n_p == 0.0) continue;
      const CovariateVector x = pattern_covariates(p);
      const EventProbabilities prob = emission_probs(beta, x);
      for (int j = 0; j < kNumLogits; ++j) {
        const double resid = counts(p, j + 1) - n_p * prob(j + 1);
        grad.segment<kNumCovariates>(j * kNumCovariates) += resid * x;
        for (int k = 0; k < kNumLogits; ++k) {
          const double w = n_p * ((j == k ? prob(j + 1) : 0.0) - prob(j + 1) * prob(k + 1));
          info.block<kNumCovariates, kNumCovariates>(j * kNumCovariates, k * kNumCovariates) +=
              w * x * x.transpose();
        }
      }
    }
    fit.iterations = iter;
    // Once the gradient test passes, one more undamped step is nearly free
    // and takes the quadratic convergence down to rounding level.
    const bool polish = grad.cwiseAbs().maxCoeff() <= kGradientTolerance;
    if (polish) fit.converged = true;

    Eigen::LDLT<CoefficientHessian> ldlt(info);
    CoefficientVector step = ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) {
      // Singular without ridge (an unobserved covariate pattern); jitter the diagonal.
      const double jitter = 1e-10 * std::max(1.0, info.trace());
      step = (info + jitter * CoefficientHessian::Identity()).ldlt().solve(grad);
    }

    if (polish) {
      const CoefficientVector trial = theta + step;
      const double trial_objective = multinomial_objective(counts, unflatten(trial), ridge);
      // Near the optimum the objective change is below rounding, so compare loosely.
      const double slack = 1e-12 * std::max(1.0, std::abs(objective));
      if (step.allFinite() && std::isfinite(trial_objective) &&
          trial_objective >= objective - slack) {
        theta = trial;
        objective = trial_objective;
      }
      break;
    }

    double scale = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving, scale *= 0.5) {
      const CoefficientVector trial = theta + scale * step;
      const double trial_objective = multinomial_objective(counts, unflatten(trial), ridge);
      if (std::isfinite(trial_objective) && trial_objective >= objective) {
        theta = trial;
        objective = trial_objective;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;  // no ascent left at machine precision
    fit.objective_trace.push_back(objective);
    fit.iterations = iter + 1;
  }

  fit.beta = unflatten(theta);
  fit.objective = objective;
  return fit;
}

MultinomialFit fit_weighted_multinomial(std::span<const WeightedEmissionSample> samples,
                                        double ridge, const StateCoefficients& start) {
  EmissionTable counts = EmissionTable::Zero();
  for (const auto& s : samples) {
    if (!std::isfinite(s.weight) || s.weight < 0.0) {
      throw DataError("fit_weighted_multinomial: sample weight must be finite and >= 0");
    }
    counts(covariate_pattern(s.covariates), event_index(s.outcome)) += s.weight;
  }
  return fit_weighted_multinomial(counts, ridge, start);
}

StateCoefficients log_odds_to_beta(const EmissionTable& table) {
  if (!table.allFinite() || (table.array() <= 0.0).any()) {
    throw DataError("log_odds_to_beta: every probability must be finite and > 0");
  }
  StateCoefficients beta = StateCoefficients::Zero();
  for (int j = 0; j < kNumLogits; ++j) {
    beta(j, 0) = std::log(table(0, j + 1) / table(0, 0));
    for (int p = 1; p < kNumEvents; ++p) {
      beta(j, p) = std::log(table(p, j + 1) / table(p, 0)) - beta(j, 0);
    }
  }
  return beta;
}

std::array<EmissionTable, 3> reference_emission_tables() {
  std::array<EmissionTable, 3> t;
  // columns GP, ED, Hosp, Spec; rows previous GP, ED, Hosp, Spec
  t[0] << 0.89, 0.07, 0.02, 0.01,
          0.50, 0.32, 0.17, 0.01,
          0.71, 0.15, 0.12, 0.02,
          0.78, 0.05, 0.10, 0.07;
  t[1] << 0.53, 0.09, 0.04, 0.34,
          0.30, 0.32, 0.20, 0.18,
          0.44, 0.16, 0.11, 0.29,
          0.55, 0.07, 0.04, 0.35;
  t[2] << 0.33, 0.40, 0.18, 0.09,
          0.11, 0.57, 0.26, 0.06,
          0.20, 0.48, 0.17, 0.15,
          0.08, 0.19, 0.07, 0.65;
  return t;
}

EmissionTable balance_row_sums(const EmissionTable& table) {
  EmissionTable out = table;
  for (int p = 0; p < kNumEvents; ++p) {
    out.row(p).array() += (1.0 - table.row(p).sum()) / kNumEvents;
  }
  if ((out.array() <= 0.0).any()) {
    throw DataError("balance_row_sums: row correction produced a non-positive probability");
  }
  return out;
}

}  // namespace cthmm
