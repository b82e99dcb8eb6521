#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace cthmm {

// Observable healthcare-utilization events. The numeric value is the column
// index used in emission tables (GP, ED, Hosp, Spec).
enum class EventCode : std::uint8_t { GP = 0, ED = 1, Hosp = 2, Spec = 3 };

inline constexpr int kNumEvents = 4;
// Logit rows per state (ED, Hosp, Spec versus the GP reference).
inline constexpr int kNumLogits = kNumEvents - 1;
// Intercept plus one-hot indicators of the previous ED, Hosp, Spec event.
inline constexpr int kNumCovariates = 4;

inline constexpr std::array<EventCode, kNumEvents> kAllEvents = {
    EventCode::GP, EventCode::ED, EventCode::Hosp, EventCode::Spec};

constexpr int event_index(EventCode e) { return static_cast<int>(e); }

// Hosp > ED > Spec > GP.
constexpr int severity_rank(EventCode e) {
  switch (e) {
    case EventCode::GP: return 0;
    case EventCode::Spec: return 1;
    case EventCode::ED: return 2;
    case EventCode::Hosp: return 3;
  }
  return -1;
}

constexpr EventCode more_severe(EventCode a, EventCode b) {
  return severity_rank(a) >= severity_rank(b) ? a : b;
}

std::string_view to_string(EventCode e);
std::optional<EventCode> parse_event(std::string_view text);

struct Observation {
  double time = 0.0;  // years since the patient's index date
  EventCode event = EventCode::GP;
};

struct PatientTimeline {
  std::string patient_id;
  std::vector<Observation> observations;
};

// Throws DataError unless the timeline is nonempty with finite, nonnegative,
// strictly increasing times.
void check_timeline(const PatientTimeline& timeline);

// Continuous-time Markov generator. Rows sum to zero, off-diagonals are rates.
class GeneratorMatrix {
 public:
  GeneratorMatrix() = default;

  // Builds a generator from its off-diagonal rates; the diagonal of `rates`
  // is ignored and replaced by the negative off-diagonal row sums. Throws
  // DataError on negative or non-finite rates.
  static GeneratorMatrix from_off_diagonal(const Eigen::MatrixXd& rates);

  // Wraps an arbitrary square matrix without checks. Used when reading
  // untrusted input that is subsequently passed to validate_parameters.
  static GeneratorMatrix unchecked(Eigen::MatrixXd rates);

  static GeneratorMatrix zero(int n_states);

  int n_states() const { return static_cast<int>(rates_.rows()); }
  const Eigen::MatrixXd& rates() const { return rates_; }
  double operator()(int from, int to) const { return rates_(from, to); }

 private:
  explicit GeneratorMatrix(Eigen::MatrixXd rates) : rates_(std::move(rates)) {}
  Eigen::MatrixXd rates_;
};

// Rows: ED, Hosp, Spec logits. Columns: intercept, prev_ED, prev_Hosp, prev_Spec.
using StateCoefficients = Eigen::Matrix<double, kNumLogits, kNumCovariates>;

// One coefficient block per hidden state.
using EmissionCoefficients = std::vector<StateCoefficients>;

struct ModelParameters {
  Eigen::VectorXd pi;
  GeneratorMatrix q;
  EmissionCoefficients beta;

  int n_states() const { return static_cast<int>(pi.size()); }
};

// Forward-backward output for one patient.
struct PosteriorSummary {
  // n_states x n_observations; column t is the marginal at observation t.
  Eigen::MatrixXd gamma;
  // One n_states x n_states endpoint posterior per consecutive pair.
  std::vector<Eigen::MatrixXd> xi;
  double log_likelihood = 0.0;
};

// Lists every broken invariant of `params`; empty means valid.
std::vector<std::string> validate_parameters(const ModelParameters& params);

// Relabels states: new state i is old state `permutation[i]`.
ModelParameters permute_states(const ModelParameters& params,
                               const std::vector<int>& permutation);

// P(ED) + P(Hosp) for a state when the previous event was GP.
double severity_score(const StateCoefficients& beta_s);

struct CanonicalOrder {
  std::vector<int> permutation;  // new index -> old index
  ModelParameters params;
};

// Sorts states by ascending severity score, breaking ties (1e-9) by
// ascending P(Spec) under the same covariates, then by original index.
CanonicalOrder canonical_state_order(const ModelParameters& params);

// Concatenation (pi, Q off-diagonals row-major, beta state-major row-major)
// used by the EM stopping rule.
Eigen::VectorXd flatten_parameters(const ModelParameters& params);

}  // namespace cthmm
