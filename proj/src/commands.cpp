#include "cthmm/commands.hpp"

#include <filesystem>
#include <fstream>

#include "cthmm/errors.hpp"

namespace cthmm {

namespace {

namespace fs = std::filesystem;

fs::path output_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw ConfigError("cannot create output directory '" + c.out + "': " + ec.message());
  return c.out;
}

std::ifstream open_input(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing '") + what + "' path in config");
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string("cannot read ") + what + " file '" + path + "'");
  return in;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  return out;
}

ModelParameters load_parameters(const RunConfig& c) {
  auto in = open_input(c.params, "params");
  ModelParameters p = read_parameters(in);
  const auto violations = validate_parameters(p);
  if (!violations.empty()) {
    std::string msg = "parameter file '" + c.params + "' is invalid:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw DataError(msg);
  }
  return p;
}

IngestResult load_data(const RunConfig& c) {
  auto in = open_input(c.data, "data");
  try {
    return ingest_csv(in);
  } catch (const DataError& e) {
    throw DataError(c.data + ": " + e.what());
  }
}

}  // namespace

void cmd_simulate(const RunConfig& c, std::ostream& log) {
  SimConfig sim;
  sim.params = load_parameters(c);
  sim.n_patients = c.n_patients;
  sim.observation_rate = c.observation_rate;
  sim.horizon_years = c.horizon_years;
  sim.rng_seed = c.fit.rng_seed;
  sim.include_t0_observation = c.include_t0_observation;
  check_sim_config(sim);

  const auto patients = simulate_cohort(sim, c.fit.execution);
  const fs::path dir = output_dir(c);
  const fs::path data = c.data.empty() ? dir / "timelines.csv" : fs::path(c.data);
  const fs::path truth = c.truth.empty() ? dir / "truth.csv" : fs::path(c.truth);
  {
    auto out = open_output(data);
    write_timeline_csv(out, patients);
  }
  {
    auto out = open_output(truth);
    write_truth_csv(out, patients);
  }
  std::size_t n_obs = 0;
  for (const auto& p : patients) n_obs += p.days.size();
  log << "simulated " << patients.size() << " patients, " << n_obs << " observations\n"
      << "timelines: " << data.string() << "\ntruth: " << truth.string() << "\n";
}

void cmd_fit(const RunConfig& c, std::ostream& log) {
  check_config(c.fit);
  const IngestResult data = load_data(c);
  if (data.timelines.empty()) throw DataError("no patients in '" + c.data + "'");
  const FitResult result = em_fit(data.timelines, c.fit);

  const fs::path dir = output_dir(c);
  {
    auto out = open_output(dir / "params.txt");
    write_parameters(out, result.params);
  }
  {
    auto out = open_output(dir / "trace.csv");
    write_trace_csv(out, result);
  }
  {
    auto out = open_output(dir / "summary.txt");
    write_fit_summary(out, result, data.report);
  }
  write_fit_summary(log, result, data.report);
}

void cmd_decode(const RunConfig& c, std::ostream& log) {
  const ModelParameters params = load_parameters(c);
  const IngestResult data = load_data(c);
  std::vector<DecodedTimeline> decoded;
  decoded.reserve(data.timelines.size());
  for (const auto& tl : data.timelines) {
    try {
      decoded.push_back(decode(tl, params));
    } catch (const DataError& e) {
      throw DataError("patient " + tl.patient_id + ": " + e.what());
    } catch (const NumericalError& e) {
      throw NumericalError("patient " + tl.patient_id + ": " + e.what());
    }
  }
  const fs::path path = output_dir(c) / "decoded.csv";
  auto out = open_output(path);
  write_decoded_csv(out, decoded);
  log << "decoded " << decoded.size() << " patients -> " << path.string() << "\n";
}

void cmd_occupancy(const RunConfig& c, std::ostream& log) {
  const ModelParameters params = load_parameters(c);
  const OccupancyTable table = state_occupancy(params.q, c.horizon, c.grid_step);
  const fs::path dir = output_dir(c);
  {
    auto out = open_output(dir / "occupancy.csv");
    write_occupancy_csv(out, table);
  }
  {
    auto out = open_output(dir / "transition_summary.txt");
    write_transition_summary(out, params.q, c.horizon);
  }
  write_transition_summary(log, params.q, c.horizon);
}

void cmd_report_emissions(const RunConfig& c, std::ostream& log) {
  const ModelParameters params = load_parameters(c);
  const fs::path path = output_dir(c) / "emissions.csv";
  auto out = open_output(path);
  write_emission_report(out, params, c.full_precision);
  log << "emission table -> " << path.string() << "\n";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  return kExitNumerical;
}

}  // namespace cthmm
