#include "cthmm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <optional>
#include <string>

#include "cthmm/emission.hpp"
#include "cthmm/errors.hpp"
#include "forward_backward_kernel.hpp"

namespace cthmm {

namespace detail {

std::vector<EmissionTable> state_emission_tables(const ModelParameters& params) {
  std::vector<EmissionTable> tables;
  tables.reserve(params.beta.size());
  for (const auto& b : params.beta) tables.push_back(emission_table(b));
  return tables;
}

void fill_emissions(const PatientTimeline& timeline, const std::vector<EmissionTable>& tables,
                    Eigen::MatrixXd& b) {
  const auto n = static_cast<Eigen::Index>(tables.size());
  const auto t_len = static_cast<Eigen::Index>(timeline.observations.size());
  b.resize(n, t_len);
  std::optional<EventCode> prev;
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const EventCode e = timeline.observations[t].event;
    const int pattern = covariate_pattern(prev);
    for (Eigen::Index s = 0; s < n; ++s) b(s, t) = tables[s](pattern, event_index(e));
    prev = e;
  }
}

double forward_backward_pass(const PatientTimeline& timeline, const Eigen::VectorXd& pi,
                             const std::vector<EmissionTable>& tables,
                             const std::vector<const Eigen::MatrixXd*>& kernels,
                             ForwardBackwardWork& w) {
  fill_emissions(timeline, tables, w.b);
  const Eigen::Index n = w.b.rows();
  const Eigen::Index t_len = w.b.cols();
  w.alpha.resize(n, t_len);
  w.beta.resize(n, t_len);
  w.scale.resize(t_len);

  double log_lik = 0.0;
  for (Eigen::Index t = 0; t < t_len; ++t) {
    if (t == 0) {
      w.alpha.col(0) = pi.cwiseProduct(w.b.col(0));
    } else {
      w.alpha.col(t) =
          (kernels[t - 1]->transpose() * w.alpha.col(t - 1)).cwiseProduct(w.b.col(t));
    }
    const double c = w.alpha.col(t).sum();
    if (!(c > 0.0) || !std::isfinite(c)) {
      throw NumericalError("forward pass: observation " + std::to_string(t) +
                           " has zero probability under the current parameters");
    }
    w.scale(t) = c;
    w.alpha.col(t) /= c;
    log_lik += std::log(c);
  }

  w.beta.col(t_len - 1).setOnes();
  for (Eigen::Index t = t_len - 2; t >= 0; --t) {
    w.beta.col(t) =
        (*kernels[t]) * w.b.col(t + 1).cwiseProduct(w.beta.col(t + 1)) / w.scale(t + 1);
  }
  return log_lik;
}

Eigen::VectorXd gamma_at(const ForwardBackwardWork& w, Eigen::Index t) {
  Eigen::VectorXd g = w.alpha.col(t).cwiseProduct(w.beta.col(t));
  return g / g.sum();
}

Eigen::MatrixXd xi_at(const ForwardBackwardWork& w, const Eigen::MatrixXd& kernel,
                      Eigen::Index t) {
  const Eigen::VectorXd right = w.b.col(t + 1).cwiseProduct(w.beta.col(t + 1));
  Eigen::MatrixXd xi = w.alpha.col(t).asDiagonal() * kernel * right.asDiagonal();
  return xi / xi.sum();
}

}  // namespace detail

std::vector<double> interval_lengths(const PatientTimeline& timeline) {
  const auto& obs = timeline.observations;
  std::vector<double> dts;
  if (obs.size() > 1) dts.reserve(obs.size() - 1);
  for (std::size_t i = 1; i < obs.size(); ++i) dts.push_back(obs[i].time - obs[i - 1].time);
  return dts;
}

std::vector<double> unique_interval_lengths(std::span<const PatientTimeline> timelines) {
  std::vector<double> all;
  for (const auto& tl : timelines) {
    const auto dts = interval_lengths(tl);
    all.insert(all.end(), dts.begin(), dts.end());
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

Eigen::MatrixXd emission_likelihoods(const PatientTimeline& timeline,
                                     const ModelParameters& params) {
  Eigen::MatrixXd b;
  detail::fill_emissions(timeline, detail::state_emission_tables(params), b);
  return b;
}

namespace {

PosteriorSummary summarize(const PatientTimeline& timeline, const ModelParameters& params,
                           const std::vector<EmissionTable>& tables, const KernelCache& cache) {
  check_timeline(timeline);
  const auto dts = interval_lengths(timeline);
  std::vector<const Eigen::MatrixXd*> kernels;
  kernels.reserve(dts.size());
  for (double dt : dts) kernels.push_back(&cache.at(dt));

  detail::ForwardBackwardWork work;
  PosteriorSummary out;
  out.log_likelihood = detail::forward_backward_pass(timeline, params.pi, tables, kernels, work);
  const Eigen::Index t_len = work.b.cols();
  out.gamma.resize(params.n_states(), t_len);
  for (Eigen::Index t = 0; t < t_len; ++t) out.gamma.col(t) = detail::gamma_at(work, t);
  out.xi.reserve(dts.size());
  for (Eigen::Index t = 0; t + 1 < t_len; ++t) {
    out.xi.push_back(detail::xi_at(work, *kernels[t], t));
  }
  return out;
}

}  // namespace

PosteriorSummary forward_backward(const PatientTimeline& timeline, const ModelParameters& params,
                                  const KernelCache& kernels) {
  return summarize(timeline, params, detail::state_emission_tables(params), kernels);
}

PosteriorSummary forward_backward(const PatientTimeline& timeline,
                                  const ModelParameters& params) {
  check_timeline(timeline);
  const KernelCache cache(params.q, unique_interval_lengths({&timeline, 1}), Execution::Serial);
  return forward_backward(timeline, params, cache);
}

double backward_log_likelihood(const PatientTimeline& timeline, const ModelParameters& params) {
  check_timeline(timeline);
  const Eigen::MatrixXd b = emission_likelihoods(timeline, params);
  const auto dts = interval_lengths(timeline);
  Eigen::VectorXd beta = Eigen::VectorXd::Ones(params.n_states());
  double log_lik = 0.0;
  for (Eigen::Index t = b.cols() - 2; t >= 0; --t) {
    const Eigen::MatrixXd p = transition_kernel(params.q, dts[t]).probs;
    Eigen::VectorXd v = p * b.col(t + 1).cwiseProduct(beta);
    const double d = v.sum();
    log_lik += std::log(d);
    beta = v / d;
  }
  return log_lik + std::log(params.pi.cwiseProduct(b.col(0)).dot(beta));
}

CohortPosteriors cohort_e_step(std::span<const PatientTimeline> timelines,
                               const ModelParameters& params, Execution exec) {
  if (timelines.empty()) throw DataError("cohort_e_step: empty cohort");
  for (const auto& tl : timelines) check_timeline(tl);
  const KernelCache cache(params.q, unique_interval_lengths(timelines), exec);
  const auto tables = detail::state_emission_tables(params);

  CohortPosteriors out;
  out.posteriors.resize(timelines.size());
  const auto count = static_cast<long>(timelines.size());
  long failed_at = std::numeric_limits<long>::max();
  std::exception_ptr failure;

  auto run_one = [&](long i) {
    try {
      out.posteriors[i] = summarize(timelines[i], params, tables, cache);
    } catch (...) {
#pragma omp critical(cthmm_cohort_e_step)
      if (i < failed_at) {
        failed_at = i;
        failure = std::current_exception();
      }
    }
  };
  if (exec == Execution::Parallel) {
#pragma omp parallel for schedule(dynamic, 8)
    for (long i = 0; i < count; ++i) run_one(i);
  } else {
    for (long i = 0; i < count; ++i) run_one(i);
  }
  if (failure) {
    const std::string who = "patient " + timelines[failed_at].patient_id + ": ";
    try {
      std::rethrow_exception(failure);
    } catch (const DataError& e) {
      throw DataError(who + e.what());
    } catch (const std::exception& e) {
      throw NumericalError(who + e.what());
    }
  }
  for (const auto& p : out.posteriors) out.log_likelihood += p.log_likelihood;
  return out;
}

DecodedTimeline decode(const PatientTimeline& timeline, const ModelParameters& params) {
  const PosteriorSummary post = forward_backward(timeline, params);
  DecodedTimeline out;
  out.patient_id = timeline.patient_id;
  out.observations.reserve(timeline.observations.size());
  for (std::size_t t = 0; t < timeline.observations.size(); ++t) {
    DecodedObservation d;
    d.time = timeline.observations[t].time;
    d.event = timeline.observations[t].event;
    d.gamma = post.gamma.col(static_cast<Eigen::Index>(t));
    Eigen::Index best = 0;
    for (Eigen::Index s = 1; s < d.gamma.size(); ++s) {
      if (d.gamma(s) > d.gamma(best)) best = s;
    }
    d.argmax_state = static_cast<int>(best);
    out.observations.push_back(std::move(d));
  }
  return out;
}

OccupancyTable state_occupancy(const GeneratorMatrix& q, double horizon, double grid_step) {
  if (!(horizon > 0.0) || !std::isfinite(horizon) || !(grid_step > 0.0) ||
      !(grid_step <= horizon)) {
    throw DataError("state_occupancy: need 0 < grid_step <= horizon");
  }
  OccupancyTable out;
  const double tol = 1e-9 * std::max(1.0, horizon);
  const auto steps = static_cast<long>(std::floor(horizon / grid_step + 1e-9));
  for (long k = 0; k <= steps; ++k) {
    double t = static_cast<double>(k) * grid_step;
    if (std::abs(t - horizon) <= tol) t = horizon;
    out.times.push_back(t);
  }
  if (out.times.back() < horizon - tol) out.times.push_back(horizon);

  const int n = q.n_states();
  out.probs.reserve(out.times.size());
  for (double t : out.times) {
    out.probs.push_back(t == 0.0 ? Eigen::MatrixXd::Identity(n, n).eval()
                                 : transition_kernel(q, t).probs);
  }
  return out;
}

}  // namespace cthmm
