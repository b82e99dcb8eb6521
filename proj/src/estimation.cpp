#include "cthmm/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "cthmm/errors.hpp"
#include "cthmm/inference.hpp"
#include "forward_backward_kernel.hpp"

namespace cthmm {

namespace {

constexpr double kMinSojourn = 1e-12;      // years; below this a state counts as unoccupied
constexpr double kMinEmissionWeight = 1e-12;
constexpr double kMinKernelProbability = 1e-300;
constexpr double kNegligibleEndpointMass = 1e-12;
constexpr long kMaxBlocks = 64;
constexpr double kBlockMemoryBudget = 256.0 * 1024 * 1024;  // bytes of endpoint mass

template <class Fn>
void for_each_index(long count, Execution exec, Fn&& fn) {
  if (exec == Execution::Parallel) {
#pragma omp parallel for schedule(dynamic, 1)
    for (long i = 0; i < count; ++i) fn(i);
  } else {
    for (long i = 0; i < count; ++i) fn(i);
  }
}

// Runs fn(i) for every index and rethrows the failure with the lowest index.
template <class Fn>
void guarded_for_each(long count, Execution exec, Fn&& fn) {
  long failed_at = std::numeric_limits<long>::max();
  std::exception_ptr failure;
  for_each_index(count, exec, [&](long i) {
    try {
      fn(i);
    } catch (...) {
#pragma omp critical(cthmm_estimation_failure)
      if (i < failed_at) {
        failed_at = i;
        failure = std::current_exception();
      }
    }
  });
  if (failure) std::rethrow_exception(failure);
}

Eigen::MatrixXd endpoint_weights(const Eigen::Ref<const Eigen::MatrixXd>& mass,
                                 const Eigen::MatrixXd& kernel, double dt) {
  const Eigen::Index n = mass.rows();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = 0; b < n; ++b) {
      if (mass(a, b) <= 0.0) continue;
      if (kernel(a, b) < kMinKernelProbability) {
        if (mass(a, b) > kNegligibleEndpointMass) {
          std::ostringstream msg;
          msg << "endpoint posterior " << mass(a, b) << " on (" << a + 1 << "," << b + 1
              << ") for dt=" << dt << " but transition probability is " << kernel(a, b);
          throw NumericalError(msg.str());
        }
        continue;
      }
      w(a, b) = mass(a, b) / kernel(a, b);
    }
  }
  return w;
}

}  // namespace

void check_config(const FitConfig& c) {
  if (c.n_states < 1) throw ConfigError("n_states must be >= 1");
  if (!(c.convergence_threshold > 0.0)) throw ConfigError("convergence_threshold must be > 0");
  if (c.max_outer_iterations < 1) throw ConfigError("max_outer_iterations must be >= 1");
  if (c.inner_q_iterations < 1) throw ConfigError("inner_q_iterations must be >= 1");
  if (c.restarts < 1) throw ConfigError("restarts must be >= 1");
  if (!(c.ridge >= 0.0) || !std::isfinite(c.ridge)) throw ConfigError("ridge must be >= 0");
}

ModelParameters initialize(int n_states, std::mt19937_64& rng) {
  if (n_states < 1) throw ConfigError("n_states must be >= 1");
  ModelParameters p;
  p.pi = Eigen::VectorXd::Constant(n_states, 1.0 / n_states);

  std::normal_distribution<double> normal(0.0, 1.0);
  p.beta.resize(n_states);
  for (auto& b : p.beta) {
    for (int j = 0; j < kNumLogits; ++j) {
      for (int c = 0; c < kNumCovariates; ++c) b(j, c) = normal(rng);
    }
  }

  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Eigen::MatrixXd rates = Eigen::MatrixXd::Zero(n_states, n_states);
  for (int i = 0; i < n_states; ++i) {
    for (int j = 0; j < n_states; ++j) {
      if (i != j) rates(i, j) = uniform(rng);
    }
  }
  p.q = GeneratorMatrix::from_off_diagonal(rates);
  return p;
}

std::mt19937_64 restart_rng(std::uint64_t seed, int restart) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(restart), 0x52455354u};
  return std::mt19937_64(seq);
}

Eigen::VectorXd update_pi(std::span<const PosteriorSummary> posteriors) {
  if (posteriors.empty()) throw DataError("update_pi: no posteriors");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(posteriors.front().gamma.rows());
  for (const auto& p : posteriors) sum += p.gamma.col(0);
  return sum / sum.sum();
}

EndpointPosteriors collect_endpoints(std::span<const PosteriorSummary> posteriors,
                                     std::span<const PatientTimeline> timelines) {
  if (posteriors.size() != timelines.size()) {
    throw DataError("collect_endpoints: posteriors and timelines are not aligned");
  }
  EndpointPosteriors out;
  out.n_states = posteriors.empty() ? 0 : static_cast<int>(posteriors.front().gamma.rows());
  out.dts = unique_interval_lengths(timelines);
  out.mass = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out.n_states) * out.n_states,
                                   static_cast<Eigen::Index>(out.dts.size()));
  for (std::size_t i = 0; i < timelines.size(); ++i) {
    const auto dts = interval_lengths(timelines[i]);
    if (dts.size() != posteriors[i].xi.size()) {
      throw DataError("collect_endpoints: xi count does not match intervals for patient " +
                      timelines[i].patient_id);
    }
    for (std::size_t t = 0; t < dts.size(); ++t) {
      const auto j = std::lower_bound(out.dts.begin(), out.dts.end(), dts[t]) - out.dts.begin();
      out.mass.col(j) += posteriors[i].xi[t].reshaped();
    }
  }
  return out;
}

JumpStatistics expected_jump_statistics(const EndpointPosteriors& endpoints,
                                        const GeneratorMatrix& q, Execution exec) {
  const int n = q.n_states();
  const auto count = static_cast<long>(endpoints.dts.size());
  std::vector<Eigen::MatrixXd> contracted(count);
  guarded_for_each(count, exec, [&](long j) {
    const double dt = endpoints.dts[j];
    const Eigen::MatrixXd kernel = transition_kernel(q, dt).probs;
    const Eigen::MatrixXd w = endpoint_weights(endpoints.at(j), kernel, dt);
    contracted[j] = contracted_van_loan(q, dt, w);
  });

  JumpStatistics out{Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n)};
  for (const auto& s : contracted) {
    for (int k = 0; k < n; ++k) {
      out.sojourn(k) += s(k, k);
      for (int l = 0; l < n; ++l) {
        if (k != l) out.jumps(k, l) += q(k, l) * s(k, l);
      }
    }
  }
  // Roundoff can leave entries a few ulps below zero.
  out.sojourn = out.sojourn.cwiseMax(0.0);
  out.jumps = out.jumps.cwiseMax(0.0);
  return out;
}

JumpStatistics expected_jump_statistics_reference(const EndpointPosteriors& endpoints,
                                                  const GeneratorMatrix& q) {
  const int n = q.n_states();
  JumpStatistics out{Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n)};
  for (std::size_t j = 0; j < endpoints.dts.size(); ++j) {
    const double dt = endpoints.dts[j];
    const Eigen::MatrixXd kernel = transition_kernel(q, dt).probs;
    const Eigen::MatrixXd w = endpoint_weights(endpoints.at(j), kernel, dt);
    for (int k = 0; k < n; ++k) {
      for (int l = 0; l < n; ++l) {
        const Eigen::MatrixXd integral = van_loan_integral(q, dt, k, l).values;
        const double total = w.cwiseProduct(integral).sum();
        if (k == l) {
          out.sojourn(k) += total;
        } else {
          out.jumps(k, l) += q(k, l) * total;
        }
      }
    }
  }
  out.sojourn = out.sojourn.cwiseMax(0.0);
  out.jumps = out.jumps.cwiseMax(0.0);
  return out;
}

SufficientStats accumulate_q_stats(std::span<const PosteriorSummary> posteriors,
                                   std::span<const PatientTimeline> timelines,
                                   const GeneratorMatrix& q_current) {
  SufficientStats stats;
  stats.endpoints = collect_endpoints(posteriors, timelines);
  if (stats.endpoints.n_states == 0) stats.endpoints.n_states = q_current.n_states();
  const JumpStatistics js = expected_jump_statistics(stats.endpoints, q_current);
  stats.sojourn = js.sojourn;
  stats.jumps = js.jumps;
  for (const auto& tl : timelines) {
    for (double dt : interval_lengths(tl)) stats.total_exposure += dt;
  }
  return stats;
}

QUpdate update_q(const SufficientStats& stats, const GeneratorMatrix& q_current,
                 int inner_iterations, Execution exec) {
  const int n = q_current.n_states();
  QUpdate out{q_current, {}};
  Eigen::VectorXd sojourn = stats.sojourn;
  Eigen::MatrixXd jumps = stats.jumps;
  std::set<int> frozen;
  for (int it = 0; it < std::max(1, inner_iterations); ++it) {
    if (it > 0) {
      if (stats.endpoints.dts.empty()) break;
      const JumpStatistics js = expected_jump_statistics(stats.endpoints, out.q, exec);
      sojourn = js.sojourn;
      jumps = js.jumps;
    }
    Eigen::MatrixXd rates = out.q.rates();
    for (int k = 0; k < n; ++k) {
      if (!(sojourn(k) > kMinSojourn)) {
        frozen.insert(k);
        continue;
      }
      for (int l = 0; l < n; ++l) {
        if (k != l) rates(k, l) = jumps(k, l) / sojourn(k);
      }
    }
    out.q = GeneratorMatrix::from_off_diagonal(rates);
  }
  out.frozen_states.assign(frozen.begin(), frozen.end());
  return out;
}

CohortIndex index_cohort(std::span<const PatientTimeline> timelines) {
  CohortIndex index;
  index.unique_dts = unique_interval_lengths(timelines);
  index.interval_dt_index.reserve(timelines.size());
  for (const auto& tl : timelines) {
    std::vector<std::uint32_t> ids;
    for (double dt : interval_lengths(tl)) {
      const auto j = std::lower_bound(index.unique_dts.begin(), index.unique_dts.end(), dt) -
                     index.unique_dts.begin();
      ids.push_back(static_cast<std::uint32_t>(j));
      index.total_exposure += dt;
    }
    index.n_intervals += static_cast<long>(ids.size());
    index.interval_dt_index.push_back(std::move(ids));
  }
  return index;
}

namespace {

struct PartialStats {
  double log_likelihood = 0.0;
  Eigen::VectorXd first_gamma;
  long first_count = 0;
  std::vector<EmissionTable> emission;
  Eigen::MatrixXd mass;

  PartialStats(int n, std::size_t n_dts)
      : first_gamma(Eigen::VectorXd::Zero(n)),
        emission(n, EmissionTable::Zero()),
        mass(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * n,
                                   static_cast<Eigen::Index>(n_dts))) {}

  void merge(const PartialStats& o) {
    log_likelihood += o.log_likelihood;
    first_gamma += o.first_gamma;
    first_count += o.first_count;
    for (std::size_t s = 0; s < emission.size(); ++s) emission[s] += o.emission[s];
    mass += o.mass;
  }
};

void add_patient(const PatientTimeline& tl, const std::vector<std::uint32_t>& dt_index,
                 const Eigen::VectorXd& pi, const std::vector<EmissionTable>& tables,
                 const KernelCache& kernels, detail::ForwardBackwardWork& work,
                 std::vector<const Eigen::MatrixXd*>& kernel_ptrs, PartialStats& acc) {
  kernel_ptrs.clear();
  for (std::uint32_t j : dt_index) kernel_ptrs.push_back(&kernels[j]);
  acc.log_likelihood += detail::forward_backward_pass(tl, pi, tables, kernel_ptrs, work);

  const auto n = static_cast<Eigen::Index>(tables.size());
  std::optional<EventCode> prev;
  for (Eigen::Index t = 0; t < work.b.cols(); ++t) {
    const Eigen::VectorXd g = detail::gamma_at(work, t);
    if (t == 0) {
      acc.first_gamma += g;
      ++acc.first_count;
    }
    const EventCode e = tl.observations[t].event;
    const int pattern = covariate_pattern(prev);
    for (Eigen::Index s = 0; s < n; ++s) acc.emission[s](pattern, event_index(e)) += g(s);
    prev = e;
    if (t + 1 < work.b.cols()) {
      acc.mass.col(dt_index[t]) += detail::xi_at(work, *kernel_ptrs[t], t).reshaped();
    }
  }
}

}  // namespace

SufficientStats e_step_statistics(std::span<const PatientTimeline> timelines,
                                  const CohortIndex& index, const ModelParameters& params,
                                  const KernelCache& kernels, Execution exec) {
  if (timelines.empty()) throw DataError("e_step_statistics: empty cohort");
  const int n = params.n_states();
  const auto tables = detail::state_emission_tables(params);
  const auto count = static_cast<long>(timelines.size());
  const std::size_t n_dts = index.unique_dts.size();

  auto fail_with_patient = [&](long i, std::exception_ptr e) {
    const std::string who = "patient " + timelines[i].patient_id + ": ";
    try {
      std::rethrow_exception(e);
    } catch (const DataError& err) {
      throw DataError(who + err.what());
    } catch (const std::exception& err) {
      throw NumericalError(who + err.what());
    }
  };

  PartialStats total(n, n_dts);
  if (exec == Execution::Serial) {
    detail::ForwardBackwardWork work;
    std::vector<const Eigen::MatrixXd*> ptrs;
    for (long i = 0; i < count; ++i) {
      try {
        add_patient(timelines[i], index.interval_dt_index[i], params.pi, tables, kernels, work,
                    ptrs, total);
      } catch (...) {
        fail_with_patient(i, std::current_exception());
      }
    }
  } else {
    // Block layout depends only on the data, never on the thread count.
    const double bytes_per_block = 8.0 * n * n * static_cast<double>(std::max<std::size_t>(1, n_dts));
    const long memory_cap = std::max(1L, static_cast<long>(kBlockMemoryBudget / bytes_per_block));
    const long n_blocks = std::max(1L, std::min({count, kMaxBlocks, memory_cap}));
    std::vector<PartialStats> partial(n_blocks, PartialStats(n, n_dts));
    long failed_at = std::numeric_limits<long>::max();
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1)
    for (long b = 0; b < n_blocks; ++b) {
      detail::ForwardBackwardWork work;
      std::vector<const Eigen::MatrixXd*> ptrs;
      const long begin = b * count / n_blocks;
      const long end = (b + 1) * count / n_blocks;
      for (long i = begin; i < end; ++i) {
        try {
          add_patient(timelines[i], index.interval_dt_index[i], params.pi, tables, kernels,
                      work, ptrs, partial[b]);
        } catch (...) {
#pragma omp critical(cthmm_e_step_failure)
          if (i < failed_at) {
            failed_at = i;
            failure = std::current_exception();
          }
          break;
        }
      }
    }
    if (failure) fail_with_patient(failed_at, failure);
    for (const auto& p : partial) total.merge(p);
  }

  SufficientStats stats;
  stats.log_likelihood = total.log_likelihood;
  stats.first_obs_gamma_sum = std::move(total.first_gamma);
  stats.first_obs_count = total.first_count;
  stats.emission_counts = std::move(total.emission);
  stats.endpoints.n_states = n;
  stats.endpoints.dts = index.unique_dts;
  stats.endpoints.mass = std::move(total.mass);
  stats.total_exposure = index.total_exposure;
  const JumpStatistics js = expected_jump_statistics(stats.endpoints, params.q, exec);
  stats.sojourn = js.sojourn;
  stats.jumps = js.jumps;
  return stats;
}

MStepResult m_step(const SufficientStats& stats, const ModelParameters& current,
                   const FitConfig& config) {
  const int n = current.n_states();
  MStepResult out;
  out.params.pi = stats.first_obs_gamma_sum / stats.first_obs_gamma_sum.sum();

  out.params.beta = current.beta;
  std::vector<char> frozen_beta(n, 0);
  guarded_for_each(n, config.execution, [&](long s) {
    const EmissionTable& counts = stats.emission_counts[s];
    if (!(counts.sum() > kMinEmissionWeight)) {
      frozen_beta[s] = 1;
      return;
    }
    out.params.beta[s] = fit_weighted_multinomial(counts, config.ridge, current.beta[s]).beta;
  });
  for (int s = 0; s < n; ++s) {
    if (frozen_beta[s]) {
      out.warnings.push_back("state " + std::to_string(s + 1) +
                             " has no emission weight; coefficients frozen");
    }
  }

  QUpdate qu = update_q(stats, current.q, config.inner_q_iterations, config.execution);
  for (int k : qu.frozen_states) {
    out.warnings.push_back("state " + std::to_string(k + 1) +
                           " has zero expected sojourn time; its Q row is not identifiable "
                           "and was left unchanged");
  }
  out.params.q = std::move(qu.q);
  return out;
}

RunResult em_run(std::span<const PatientTimeline> timelines, const ModelParameters& start,
                 const FitConfig& config) {
  check_config(config);
  if (timelines.empty()) throw DataError("em_run: empty cohort");
  for (const auto& tl : timelines) check_timeline(tl);
  const CohortIndex index = index_cohort(timelines);

  RunResult run;
  run.params = start;
  std::set<std::string> warnings;
  for (int it = 0; it < config.max_outer_iterations; ++it) {
    const KernelCache kernels(run.params.q, index.unique_dts, config.execution);
    const SufficientStats stats =
        e_step_statistics(timelines, index, run.params, kernels, config.execution);
    run.log_likelihood_trace.push_back(stats.log_likelihood);

    MStepResult m = m_step(stats, run.params, config);
    warnings.insert(m.warnings.begin(), m.warnings.end());
    run.final_delta_norm = (flatten_parameters(m.params) - flatten_parameters(run.params)).norm();
    if (!std::isfinite(run.final_delta_norm)) {
      throw NumericalError("em_run: parameters became non-finite at iteration " +
                           std::to_string(it + 1));
    }
    run.params = std::move(m.params);
    run.n_iterations = it + 1;
    if (run.final_delta_norm < config.convergence_threshold) {
      run.converged = true;
      break;
    }
  }
  const KernelCache kernels(run.params.q, index.unique_dts, config.execution);
  run.log_likelihood_trace.push_back(
      e_step_statistics(timelines, index, run.params, kernels, config.execution).log_likelihood);
  run.warnings.assign(warnings.begin(), warnings.end());
  return run;
}

FitResult em_fit(std::span<const PatientTimeline> timelines, const FitConfig& config) {
  check_config(config);
  if (timelines.empty()) throw DataError("em_fit: empty cohort");
  for (const auto& tl : timelines) check_timeline(tl);

  FitResult result;
  std::optional<RunResult> best;
  for (int r = 0; r < config.restarts; ++r) {
    RestartDiagnostics diag;
    diag.restart_index = r;
    try {
      auto rng = restart_rng(config.rng_seed, r);
      RunResult run = em_run(timelines, initialize(config.n_states, rng), config);
      const auto violations = validate_parameters(run.params);
      if (!violations.empty()) throw NumericalError("invalid parameters: " + violations.front());
      diag.ok = true;
      diag.final_log_likelihood = run.log_likelihood_trace.back();
      diag.n_iterations = run.n_iterations;
      diag.converged = run.converged;
      diag.message = run.converged ? "converged" : "reached max_outer_iterations";
      if (!best || diag.final_log_likelihood > best->log_likelihood_trace.back()) {
        best = std::move(run);
        result.restart_index = r;
      }
    } catch (const std::exception& e) {
      diag.ok = false;
      diag.message = e.what();
    }
    result.restarts.push_back(diag);
  }

  if (!best) {
    std::ostringstream msg;
    msg << "em_fit: all " << config.restarts << " restarts failed";
    for (const auto& d : result.restarts) msg << "\n  restart " << d.restart_index << ": " << d.message;
    throw NumericalError(msg.str());
  }
  result.params = canonical_state_order(best->params).params;
  result.log_likelihood_trace = std::move(best->log_likelihood_trace);
  result.n_iterations = best->n_iterations;
  result.converged = best->converged;
  result.final_delta_norm = best->final_delta_norm;
  result.warnings = std::move(best->warnings);
  return result;
}

}  // namespace cthmm
