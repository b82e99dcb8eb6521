// Serial reference vs OpenMP kernels on a simulated cohort.

#include <map>

#include <benchmark/benchmark.h>

#include "cthmm/estimation.hpp"
#include "cthmm/simulate.hpp"

using namespace cthmm;

namespace {

ModelParameters bench_parameters() {
  ModelParameters p;
  p.pi = Eigen::Vector3d(0.6, 0.3, 0.1);
  Eigen::MatrixXd q(3, 3);
  q << 0, 0.08, 0.03, 0.4, 0, 0.1, 0.25, 0.15, 0;
  p.q = GeneratorMatrix::from_off_diagonal(q);
  const auto tables = reference_emission_tables();
  for (const auto& t : tables) p.beta.push_back(log_odds_to_beta(balance_row_sums(t)));
  return p;
}

struct Fixture {
  ModelParameters params = bench_parameters();
  std::vector<PatientTimeline> cohort;
  CohortIndex index;

  explicit Fixture(int n_patients) {
    SimConfig sim;
    sim.params = params;
    sim.n_patients = n_patients;
    sim.rng_seed = 7;
    cohort = timelines_of(simulate_cohort(sim));
    index = index_cohort(cohort);
  }
};

const Fixture& fixture(int n) {
  static std::map<int, Fixture> cache;
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, Fixture(n)).first;
  return it->second;
}

void e_step(benchmark::State& state, Execution exec) {
  const auto& f = fixture(static_cast<int>(state.range(0)));
  const KernelCache kernels(f.params.q, f.index.unique_dts);
  for (auto _ : state) {
    auto stats = e_step_statistics(f.cohort, f.index, f.params, kernels, exec);
    benchmark::DoNotOptimize(stats.log_likelihood);
  }
  state.SetItemsProcessed(state.iterations() * f.index.n_intervals);
}

void kernels(benchmark::State& state, Execution exec) {
  const auto& f = fixture(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    KernelCache cache(f.params.q, f.index.unique_dts, exec);
    benchmark::DoNotOptimize(cache[0].data());
  }
  state.counters["unique_dts"] = static_cast<double>(f.index.unique_dts.size());
}

void jump_stats(benchmark::State& state, Execution exec) {
  const auto& f = fixture(static_cast<int>(state.range(0)));
  const KernelCache cache(f.params.q, f.index.unique_dts);
  const auto stats = e_step_statistics(f.cohort, f.index, f.params, cache, Execution::Serial);
  for (auto _ : state) {
    auto js = expected_jump_statistics(stats.endpoints, f.params.q, exec);
    benchmark::DoNotOptimize(js.sojourn.data());
  }
}

}  // namespace

BENCHMARK_CAPTURE(e_step, serial, Execution::Serial)->Arg(2000)->Arg(20000)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(e_step, parallel, Execution::Parallel)->Arg(2000)->Arg(20000)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(kernels, serial, Execution::Serial)->Arg(2000)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(kernels, parallel, Execution::Parallel)->Arg(2000)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(jump_stats, serial, Execution::Serial)->Arg(2000)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(jump_stats, parallel, Execution::Parallel)->Arg(2000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
