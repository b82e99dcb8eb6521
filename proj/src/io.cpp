#include "cthmm/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <unordered_map>

#include "cthmm/emission.hpp"
#include "cthmm/errors.hpp"

namespace cthmm {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string exact(double v) { return fmt("%.17g", v); }

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<double> parse_reals(std::string_view line, std::size_t line_no) {
  std::vector<double> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) {
      throw DataError("parameters line " + std::to_string(line_no) + ": '" + tok +
                      "' is not a number");
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace

std::vector<RawEventRecord> read_event_csv(std::istream& in) {
  std::vector<RawEventRecord> out;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view row = trim(line);
    if (row.empty()) continue;
    if (!header_seen) {
      if (row != "patient_id,day,event") {
        throw DataError("line " + std::to_string(line_no) +
                        ": expected header 'patient_id,day,event'");
      }
      header_seen = true;
      continue;
    }
    const auto fields = split(row, ',');
    if (fields.size() != 3) {
      throw DataError("line " + std::to_string(line_no) + ": expected 3 fields, got " +
                      std::to_string(fields.size()));
    }
    RawEventRecord rec;
    rec.patient_id = std::string(trim(fields[0]));
    if (rec.patient_id.empty()) {
      throw DataError("line " + std::to_string(line_no) + ": empty patient_id");
    }
    const std::string_view day = trim(fields[1]);
    const auto [ptr, ec] = std::from_chars(day.data(), day.data() + day.size(), rec.day);
    if (ec != std::errc() || ptr != day.data() + day.size()) {
      throw DataError("line " + std::to_string(line_no) + ": day '" + std::string(day) +
                      "' is not an integer");
    }
    if (rec.day < 0) {
      throw DataError("line " + std::to_string(line_no) + ": negative day " +
                      std::to_string(rec.day));
    }
    const auto event = parse_event(trim(fields[2]));
    if (!event) {
      throw DataError("line " + std::to_string(line_no) + ": unknown event code '" +
                      std::string(trim(fields[2])) + "'");
    }
    rec.event = *event;
    out.push_back(std::move(rec));
  }
  return out;
}

IngestResult ingest(std::span<const RawEventRecord> records) {
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::string> ids;
  std::vector<std::map<long, EventCode>> days;
  IngestResult out;
  out.report.n_records = records.size();
  for (const auto& r : records) {
    if (r.day < 0) throw DataError("ingest: negative day for patient " + r.patient_id);
    auto [it, inserted] = slot.try_emplace(r.patient_id, ids.size());
    if (inserted) {
      ids.push_back(r.patient_id);
      days.emplace_back();
    }
    auto& per_day = days[it->second];
    auto [d, fresh] = per_day.try_emplace(r.day, r.event);
    if (!fresh) {
      d->second = more_severe(d->second, r.event);
      ++out.report.n_collapsed;
    }
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (days[i].empty()) {
      ++out.report.n_dropped_patients;
      continue;
    }
    PatientTimeline tl;
    tl.patient_id = ids[i];
    for (const auto& [day, event] : days[i]) {
      tl.observations.push_back({static_cast<double>(day) / kDaysPerYear, event});
    }
    out.timelines.push_back(std::move(tl));
  }
  out.report.n_patients = out.timelines.size();
  return out;
}

IngestResult ingest_csv(std::istream& in) {
  const auto records = read_event_csv(in);
  return ingest(records);
}

void write_timeline_csv(std::ostream& out, std::span<const SimulatedPatient> patients) {
  out << "patient_id,day,event\n";
  for (const auto& p : patients) {
    for (std::size_t i = 0; i < p.days.size(); ++i) {
      out << p.timeline.patient_id << ',' << p.days[i] << ','
          << to_string(p.timeline.observations[i].event) << '\n';
    }
  }
}

void write_truth_csv(std::ostream& out, std::span<const SimulatedPatient> patients) {
  out << "patient_id,jump_time_years,state\n";
  for (const auto& p : patients) {
    out << p.timeline.patient_id << ",0," << p.trajectory.initial_state + 1 << '\n';
    for (const Jump& j : p.trajectory.jumps) {
      out << p.timeline.patient_id << ',' << exact(j.time) << ',' << j.state + 1 << '\n';
    }
  }
}

void write_parameters(std::ostream& out, const ModelParameters& params) {
  const int n = params.n_states();
  out << "# continuous-time HMM parameters, " << n << " states\n";
  out << "pi:";
  for (int i = 0; i < n; ++i) out << ' ' << exact(params.pi(i));
  out << "\nQ:\n";
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) out << (j ? " " : "") << exact(params.q(i, j));
    out << '\n';
  }
  out << "# beta rows: ED, Hosp, Spec logits vs GP; columns: intercept, prev_ED, prev_Hosp, "
         "prev_Spec\n";
  for (int s = 0; s < n; ++s) {
    out << "beta state " << s + 1 << ":\n";
    for (int r = 0; r < kNumLogits; ++r) {
      for (int c = 0; c < kNumCovariates; ++c) out << (c ? " " : "") << exact(params.beta[s](r, c));
      out << '\n';
    }
  }
}

ModelParameters read_parameters(std::istream& in) {
  std::vector<std::pair<std::size_t, std::string>> lines;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view v = raw;
    if (const auto hash = v.find('#'); hash != std::string_view::npos) v = v.substr(0, hash);
    v = trim(v);
    if (!v.empty()) lines.emplace_back(line_no, std::string(v));
  }

  ModelParameters params;
  std::optional<Eigen::MatrixXd> q;
  std::map<int, StateCoefficients> beta;
  int n = 0;
  auto need_n = [&](std::size_t at) {
    if (n == 0) throw DataError("parameters line " + std::to_string(at) + ": 'pi:' must come first");
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& [at, text] = lines[i];
    if (text.rfind("pi:", 0) == 0) {
      const auto values = parse_reals(std::string_view(text).substr(3), at);
      if (values.empty()) throw DataError("parameters line " + std::to_string(at) + ": empty pi");
      n = static_cast<int>(values.size());
      params.pi = Eigen::Map<const Eigen::VectorXd>(values.data(), n);
    } else if (text == "Q:") {
      need_n(at);
      Eigen::MatrixXd m(n, n);
      for (int r = 0; r < n; ++r) {
        if (++i >= lines.size()) throw DataError("parameters: Q block truncated");
        const auto values = parse_reals(lines[i].second, lines[i].first);
        if (static_cast<int>(values.size()) != n) {
          throw DataError("parameters line " + std::to_string(lines[i].first) + ": Q row needs " +
                          std::to_string(n) + " values");
        }
        for (int c = 0; c < n; ++c) m(r, c) = values[c];
      }
      q = std::move(m);
    } else if (text.rfind("beta state ", 0) == 0 && text.back() == ':') {
      need_n(at);
      const std::string idx = text.substr(11, text.size() - 12);
      int s = 0;
      const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), s);
      if (ec != std::errc() || ptr != idx.data() + idx.size() || s < 1 || s > n) {
        throw DataError("parameters line " + std::to_string(at) + ": bad state index '" + idx + "'");
      }
      StateCoefficients b;
      for (int r = 0; r < kNumLogits; ++r) {
        if (++i >= lines.size()) throw DataError("parameters: beta block truncated");
        const auto values = parse_reals(lines[i].second, lines[i].first);
        if (static_cast<int>(values.size()) != kNumCovariates) {
          throw DataError("parameters line " + std::to_string(lines[i].first) +
                          ": beta row needs 4 values");
        }
        for (int c = 0; c < kNumCovariates; ++c) b(r, c) = values[c];
      }
      if (!beta.emplace(s - 1, b).second) {
        throw DataError("parameters line " + std::to_string(at) + ": duplicate beta state");
      }
    } else {
      throw DataError("parameters line " + std::to_string(at) + ": unrecognized '" + text + "'");
    }
  }
  if (n == 0) throw DataError("parameters: missing 'pi:' line");
  if (!q) throw DataError("parameters: missing 'Q:' block");
  if (static_cast<int>(beta.size()) != n) {
    throw DataError("parameters: expected " + std::to_string(n) + " beta blocks, found " +
                    std::to_string(beta.size()));
  }
  params.q = GeneratorMatrix::unchecked(std::move(*q));
  for (auto& [s, b] : beta) params.beta.push_back(b);
  return params;
}

void write_emission_report(std::ostream& out, const ModelParameters& params,
                           bool full_precision) {
  const ModelParameters canon = canonical_state_order(params).params;
  const int n = canon.n_states();
  std::vector<EmissionTable> tables;
  for (const auto& b : canon.beta) tables.push_back(emission_table(b));

  out << "previous_event";
  for (int s = 0; s < n; ++s) {
    for (EventCode e : kAllEvents) out << ",state" << s + 1 << '_' << to_string(e);
  }
  out << '\n';
  for (EventCode prev : kAllEvents) {
    out << to_string(prev);
    for (int s = 0; s < n; ++s) {
      for (EventCode e : kAllEvents) {
        const double p = tables[s](event_index(prev), event_index(e));
        out << ',' << (full_precision ? exact(p) : fmt("%.2f", p));
      }
    }
    out << '\n';
  }
}

void write_occupancy_csv(std::ostream& out, const OccupancyTable& table) {
  out << "start_state,t,state,probability\n";
  if (table.probs.empty()) return;
  const Eigen::Index n = table.probs.front().rows();
  for (Eigen::Index start = 0; start < n; ++start) {
    for (std::size_t i = 0; i < table.times.size(); ++i) {
      for (Eigen::Index s = 0; s < n; ++s) {
        out << start + 1 << ',' << fmt("%.10g", table.times[i]) << ',' << s + 1 << ','
            << exact(table.probs[i](start, s)) << '\n';
      }
    }
  }
}

void write_transition_summary(std::ostream& out, const GeneratorMatrix& q, double horizon) {
  const Eigen::MatrixXd p = transition_kernel(q, horizon).probs;
  out << "Transition probabilities after " << fmt("%g", horizon)
      << " years (row = start state, column = state at horizon):\n";
  out << "start";
  for (int s = 0; s < q.n_states(); ++s) out << "\tstate" << s + 1;
  out << '\n';
  for (int r = 0; r < q.n_states(); ++r) {
    out << r + 1;
    for (int s = 0; s < q.n_states(); ++s) out << '\t' << fmt("%.12f", p(r, s));
    out << '\n';
  }
}

void write_decoded_csv(std::ostream& out, std::span<const DecodedTimeline> decoded) {
  out << "patient_id,time,event";
  const Eigen::Index n =
      decoded.empty() || decoded.front().observations.empty()
          ? 0
          : decoded.front().observations.front().gamma.size();
  for (Eigen::Index s = 0; s < n; ++s) out << ",gamma_" << s + 1;
  out << ",argmax_state\n";
  for (const auto& d : decoded) {
    for (const auto& o : d.observations) {
      out << d.patient_id << ',' << exact(o.time) << ',' << to_string(o.event);
      for (Eigen::Index s = 0; s < o.gamma.size(); ++s) out << ',' << exact(o.gamma(s));
      out << ',' << o.argmax_state + 1 << '\n';
    }
  }
}

void write_trace_csv(std::ostream& out, const FitResult& result) {
  out << "iteration,log_likelihood\n";
  for (std::size_t i = 0; i < result.log_likelihood_trace.size(); ++i) {
    out << i << ',' << exact(result.log_likelihood_trace[i]) << '\n';
  }
}

void write_fit_summary(std::ostream& out, const FitResult& r, const IngestReport& data) {
  const int n = r.params.n_states();
  out << "patients: " << data.n_patients << " (records " << data.n_records << ", same-day events "
      << "collapsed " << data.n_collapsed << ", dropped patients " << data.n_dropped_patients
      << ")\n";
  out << "states: " << n << "\n";
  out << "free parameters: " << (n - 1) + n * (n - 1) + n * kNumLogits * kNumCovariates << "\n";
  out << "winning restart: " << r.restart_index << " of " << r.restarts.size() << "\n";
  out << "iterations: " << r.n_iterations << (r.converged ? " (converged)" : " (not converged)")
      << "\n";
  out << "final parameter change norm: " << exact(r.final_delta_norm) << "\n";
  out << "final log-likelihood: " << exact(r.final_log_likelihood()) << "\n";
  for (const auto& d : r.restarts) {
    out << "  restart " << d.restart_index << ": ";
    if (d.ok) {
      out << "log-likelihood " << exact(d.final_log_likelihood) << ", " << d.n_iterations
          << " iterations, " << d.message << "\n";
    } else {
      out << "failed: " << d.message << "\n";
    }
  }
  for (const auto& w : r.warnings) out << "warning: " << w << "\n";
  out << "\nemission probabilities (rows: previous event):\n";
  write_emission_report(out, r.params);
  out << "\nQ:\n";
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) out << (j ? "\t" : "") << fmt("%.6f", r.params.q(i, j));
    out << "\n";
  }
}

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T v{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("value '" + value + "' for key '" + key + "' is not a valid number");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("value '" + value + "' for key '" + key + "' is not a boolean");
}

}  // namespace

void apply_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "data") c.data = value;
  else if (key == "truth") c.truth = value;
  else if (key == "params") c.params = value;
  else if (key == "out") c.out = value;
  else if (key == "n_states") c.fit.n_states = parse_number<int>(key, value);
  else if (key == "convergence_threshold") c.fit.convergence_threshold = parse_number<double>(key, value);
  else if (key == "max_outer_iterations") c.fit.max_outer_iterations = parse_number<int>(key, value);
  else if (key == "inner_q_iterations") c.fit.inner_q_iterations = parse_number<int>(key, value);
  else if (key == "restarts") c.fit.restarts = parse_number<int>(key, value);
  else if (key == "seed") c.fit.rng_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "ridge") c.fit.ridge = parse_number<double>(key, value);
  else if (key == "execution") {
    if (value == "serial") c.fit.execution = Execution::Serial;
    else if (value == "parallel") c.fit.execution = Execution::Parallel;
    else throw ConfigError("execution must be 'serial' or 'parallel'");
  }
  else if (key == "n_patients") c.n_patients = parse_number<int>(key, value);
  else if (key == "observation_rate") c.observation_rate = parse_number<double>(key, value);
  else if (key == "horizon_years") c.horizon_years = parse_number<double>(key, value);
  else if (key == "include_t0_observation") c.include_t0_observation = parse_bool(key, value);
  else if (key == "horizon") c.horizon = parse_number<double>(key, value);
  else if (key == "grid_step") c.grid_step = parse_number<double>(key, value);
  else if (key == "full_precision") c.full_precision = parse_bool(key, value);
  else throw ConfigError("unknown key '" + key + "'");
}

RunConfig parse_run_config(std::istream& in) {
  RunConfig c;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view v = raw;
    if (const auto hash = v.find('#'); hash != std::string_view::npos) v = v.substr(0, hash);
    v = trim(v);
    if (v.empty()) continue;
    const auto eq = v.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    try {
      apply_config_value(c, std::string(trim(v.substr(0, eq))), std::string(trim(v.substr(eq + 1))));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace cthmm
