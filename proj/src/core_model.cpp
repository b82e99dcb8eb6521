#include "cthmm/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cthmm/emission.hpp"
#include "cthmm/errors.hpp"

namespace cthmm {

std::string_view to_string(EventCode e) {
  switch (e) {
    case EventCode::GP: return "GP";
    case EventCode::ED: return "ED";
    case EventCode::Hosp: return "Hosp";
    case EventCode::Spec: return "Spec";
  }
  return "?";
}

std::optional<EventCode> parse_event(std::string_view text) {
  for (EventCode e : kAllEvents) {
    if (text == to_string(e)) return e;
  }
  return std::nullopt;
}

void check_timeline(const PatientTimeline& timeline) {
  const auto& obs = timeline.observations;
  if (obs.empty()) {
    throw DataError("patient " + timeline.patient_id + ": timeline has no observations");
  }
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (!std::isfinite(obs[i].time) || obs[i].time < 0.0) {
      throw DataError("patient " + timeline.patient_id + ": observation " + std::to_string(i) +
                      " has invalid time");
    }
    if (i > 0 && !(obs[i].time > obs[i - 1].time)) {
      throw DataError("patient " + timeline.patient_id +
                      ": observation times are not strictly increasing at index " +
                      std::to_string(i));
    }
  }
}

GeneratorMatrix GeneratorMatrix::from_off_diagonal(const Eigen::MatrixXd& rates) {
  if (rates.rows() != rates.cols() || rates.rows() == 0) {
    throw DataError("generator must be a nonempty square matrix");
  }
  Eigen::MatrixXd q = rates;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      if (i == j) continue;
      if (!std::isfinite(q(i, j)) || q(i, j) < 0.0) {
        throw DataError("generator off-diagonal entry (" + std::to_string(i + 1) + "," +
                        std::to_string(j + 1) + ") must be finite and nonnegative");
      }
      row += q(i, j);
    }
    q(i, i) = -row;
  }
  return GeneratorMatrix(std::move(q));
}

GeneratorMatrix GeneratorMatrix::unchecked(Eigen::MatrixXd rates) {
  return GeneratorMatrix(std::move(rates));
}

GeneratorMatrix GeneratorMatrix::zero(int n_states) {
  return GeneratorMatrix(Eigen::MatrixXd::Zero(n_states, n_states));
}

std::vector<std::string> validate_parameters(const ModelParameters& params) {
  std::vector<std::string> out;
  const Eigen::Index n = params.pi.size();
  auto fmt = [](double v) {
    std::ostringstream s;
    s.precision(12);
    s << v;
    return s.str();
  };

  if (n == 0) out.emplace_back("pi: empty state vector");
  double pi_sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = params.pi(i);
    if (!std::isfinite(p) || p < 0.0) {
      out.push_back("pi[" + std::to_string(i + 1) + "] = " + fmt(p) + " violates pi >= 0");
    }
    pi_sum += p;
  }
  if (n > 0 && !(std::abs(pi_sum - 1.0) <= 1e-12)) {
    out.push_back("pi sums to " + fmt(pi_sum) + ", violates |sum(pi) - 1| <= 1e-12");
  }

  const Eigen::MatrixXd& q = params.q.rates();
  if (q.rows() != n || q.cols() != n) {
    out.push_back("Q: dimension " + std::to_string(q.rows()) + "x" + std::to_string(q.cols()) +
                  " inconsistent with " + std::to_string(n) + " states");
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      double row = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!std::isfinite(q(i, j))) {
          out.push_back("Q(" + std::to_string(i + 1) + "," + std::to_string(j + 1) +
                        ") is not finite");
        } else if (i != j && q(i, j) < 0.0) {
          out.push_back("Q(" + std::to_string(i + 1) + "," + std::to_string(j + 1) + ") = " +
                        fmt(q(i, j)) + " violates off-diagonal rate >= 0");
        }
        row += q(i, j);
      }
      if (std::isfinite(row) && !(std::abs(row) <= 1e-12)) {
        out.push_back("Q row " + std::to_string(i + 1) + " sums to " + fmt(row) +
                      ", violates row-sum = 0 (|sum| <= 1e-12)");
      }
    }
  }

  if (static_cast<Eigen::Index>(params.beta.size()) != n) {
    out.push_back("beta: " + std::to_string(params.beta.size()) +
                  " coefficient blocks inconsistent with " + std::to_string(n) + " states");
  }
  for (std::size_t s = 0; s < params.beta.size(); ++s) {
    if (!params.beta[s].allFinite()) {
      out.push_back("beta state " + std::to_string(s + 1) + " has non-finite coefficients");
    }
  }
  return out;
}

ModelParameters permute_states(const ModelParameters& params, const std::vector<int>& perm) {
  const int n = params.n_states();
  if (static_cast<int>(perm.size()) != n) {
    throw DataError("permutation size does not match state count");
  }
  ModelParameters out;
  out.pi.resize(n);
  Eigen::MatrixXd q(n, n);
  out.beta.resize(n);
  for (int i = 0; i < n; ++i) {
    out.pi(i) = params.pi(perm[i]);
    out.beta[i] = params.beta[perm[i]];
    for (int j = 0; j < n; ++j) q(i, j) = params.q(perm[i], perm[j]);
  }
  out.q = GeneratorMatrix::unchecked(std::move(q));
  return out;
}

double severity_score(const StateCoefficients& beta_s) {
  const EventProbabilities p = emission_probs(beta_s, encode_covariates(EventCode::GP));
  return p(event_index(EventCode::ED)) + p(event_index(EventCode::Hosp));
}

CanonicalOrder canonical_state_order(const ModelParameters& params) {
  const int n = params.n_states();
  std::vector<double> severity(n);
  std::vector<double> spec(n);
  for (int s = 0; s < n; ++s) {
    const EventProbabilities p = emission_probs(params.beta[s], encode_covariates(EventCode::GP));
    severity[s] = p(event_index(EventCode::ED)) + p(event_index(EventCode::Hosp));
    spec[s] = p(event_index(EventCode::Spec));
  }
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
    if (std::abs(severity[a] - severity[b]) > 1e-9) return severity[a] < severity[b];
    if (spec[a] != spec[b]) return spec[a] < spec[b];
    return a < b;
  });
  return {perm, permute_states(params, perm)};
}

Eigen::VectorXd flatten_parameters(const ModelParameters& params) {
  const int n = params.n_states();
  Eigen::VectorXd v(n + n * (n - 1) + n * kNumLogits * kNumCovariates);
  Eigen::Index k = 0;
  for (int i = 0; i < n; ++i) v(k++) = params.pi(i);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) v(k++) = params.q(i, j);
    }
  }
  for (int s = 0; s < n; ++s) {
    for (int r = 0; r < kNumLogits; ++r) {
      for (int c = 0; c < kNumCovariates; ++c) v(k++) = params.beta[s](r, c);
    }
  }
  return v;
}

}  // namespace cthmm
