#pragma once

#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cthmm/core_model.hpp"
#include "cthmm/estimation.hpp"
#include "cthmm/inference.hpp"
#include "cthmm/simulate.hpp"

namespace cthmm {

struct RawEventRecord {
  std::string patient_id;
  long day = 0;
  EventCode event = EventCode::GP;
};

// Reads `patient_id,day,event` rows after the header. Throws DataError with
// the 1-based line number on malformed rows, unknown codes or negative days.
std::vector<RawEventRecord> read_event_csv(std::istream& in);

struct IngestReport {
  std::size_t n_records = 0;
  std::size_t n_patients = 0;
  std::size_t n_collapsed = 0;  // same-day events discarded by the severity rule
  std::size_t n_dropped_patients = 0;
};

struct IngestResult {
  std::vector<PatientTimeline> timelines;
  IngestReport report;
};

/// Groups by patient in order of first appearance, keeps the most severe
/// event per patient-day (Hosp > ED > Spec > GP) and converts days to years
/// with 365.25 days per year.
IngestResult ingest(std::span<const RawEventRecord> records);

IngestResult ingest_csv(std::istream& in);

void write_timeline_csv(std::ostream& out, std::span<const SimulatedPatient> patients);
// patient_id,jump_time_years,state with the initial state at time 0; states are 1-based.
void write_truth_csv(std::ostream& out, std::span<const SimulatedPatient> patients);

/// Plain-text parameter file:
///   pi: p1 ... pN
///   Q:
///   <N rows of N reals>
///   beta state s:
///   <3 rows (ED, Hosp, Spec) of 4 reals (intercept, prev_ED, prev_Hosp, prev_Spec)>
/// Lines starting with '#' are comments. Values are written with 17
/// significant digits so they read back exactly.
void write_parameters(std::ostream& out, const ModelParameters& params);

// Parses the format above without checking invariants (see validate_parameters).
ModelParameters read_parameters(std::istream& in);

// Rows GP, ED, Hosp, Spec (previous event); columns GP, ED, Hosp, Spec per
// state in canonical order. Two decimals unless full_precision.
void write_emission_report(std::ostream& out, const ModelParameters& params,
                           bool full_precision = false);

// Long format: start_state,t,state,probability (states 1-based).
void write_occupancy_csv(std::ostream& out, const OccupancyTable& table);

void write_transition_summary(std::ostream& out, const GeneratorMatrix& q, double horizon);

// patient_id,time,event,gamma_1..gamma_N,argmax_state (state 1-based).
void write_decoded_csv(std::ostream& out, std::span<const DecodedTimeline> decoded);

void write_trace_csv(std::ostream& out, const FitResult& result);

void write_fit_summary(std::ostream& out, const FitResult& result, const IngestReport& data);

// key=value run configuration. Missing keys keep their defaults.
struct RunConfig {
  std::string data;     // timeline CSV (input for fit/decode, output for simulate)
  std::string truth;    // truth CSV written by simulate
  std::string params;   // parameter file (input for simulate/decode/occupancy/report)
  std::string out = ".";  // output directory

  FitConfig fit;

  int n_patients = 100;
  double observation_rate = 3.0;
  double horizon_years = 5.0;
  bool include_t0_observation = true;

  double horizon = 5.0;  // occupancy horizon, years
  double grid_step = 0.1;
  bool full_precision = false;
};

// Throws ConfigError naming the line for unknown keys or bad values.
RunConfig parse_run_config(std::istream& in);
// Applies one key=value assignment; shared by the file parser and overrides.
void apply_config_value(RunConfig& config, const std::string& key, const std::string& value);

}  // namespace cthmm
