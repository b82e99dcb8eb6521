#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

#include "cthmm/commands.hpp"
#include "cthmm/emission.hpp"
#include "cthmm/errors.hpp"
#include "cthmm/io.hpp"

using namespace cthmm;
namespace fs = std::filesystem;

namespace {

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Fresh scratch directory per test case.
fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cthmm_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string params_text(const ModelParameters& p) {
  std::ostringstream s;
  write_parameters(s, p);
  return s.str();
}

std::string report_of(const ModelParameters& p, bool full = false) {
  std::ostringstream s;
  write_emission_report(s, p, full);
  return s.str();
}

}  // namespace

TEST_CASE("ingest applies the same-day severity rule") {
  SUBCASE("GP and ED on day 10 collapse to ED") {
    std::istringstream in("patient_id,day,event\na,10,GP\na,10,ED\n");
    const auto r = ingest_csv(in);
    REQUIRE(r.timelines.size() == 1);
    REQUIRE(r.timelines[0].observations.size() == 1);
    CHECK(r.timelines[0].observations[0].time == 10 / 365.25);
    CHECK(r.timelines[0].observations[0].event == EventCode::ED);
    CHECK(r.report.n_collapsed == 1);
  }
  SUBCASE("Spec and Hosp on day 30 collapse to Hosp") {
    std::istringstream in("patient_id,day,event\np,400,GP\np,30,Spec\np,0,GP\np,30,Hosp\n");
    const auto r = ingest_csv(in);
    REQUIRE(r.timelines.size() == 1);
    const auto& o = r.timelines[0].observations;
    REQUIRE(o.size() == 3);
    CHECK(o[0].time == 0.0);
    CHECK(o[1].time == 30 / 365.25);
    CHECK(o[2].time == 400 / 365.25);
    CHECK(o[1].event == EventCode::Hosp);
    CHECK_NOTHROW(check_timeline(r.timelines[0]));
  }
  SUBCASE("every ordering of a same-day pair keeps the more severe event") {
    for (EventCode a : kAllEvents) {
      for (EventCode b : kAllEvents) {
        const std::vector<RawEventRecord> recs{{"x", 3, a}, {"x", 3, b}};
        const auto r = ingest(recs);
        CHECK(r.timelines[0].observations[0].event == more_severe(a, b));
        CHECK(severity_rank(r.timelines[0].observations[0].event) ==
              std::max(severity_rank(a), severity_rank(b)));
      }
    }
  }
  SUBCASE("patients keep their order of first appearance") {
    std::istringstream in("patient_id,day,event\nz,1,GP\na,2,ED\nz,3,Spec\nm,0,GP\n");
    const auto r = ingest_csv(in);
    REQUIRE(r.timelines.size() == 3);
    CHECK(r.timelines[0].patient_id == "z");
    CHECK(r.timelines[1].patient_id == "a");
    CHECK(r.timelines[2].patient_id == "m");
    CHECK(r.report.n_records == 4);
  }
  SUBCASE("empty input") {
    std::istringstream header_only("patient_id,day,event\n");
    auto r = ingest_csv(header_only);
    CHECK(r.timelines.empty());
    CHECK(r.report.n_patients == 0);
    std::istringstream nothing("");
    r = ingest_csv(nothing);
    CHECK(r.timelines.empty());
  }
}

TEST_CASE("event CSV errors carry the line number") {
  const auto message = [](const std::string& text) -> std::string {
    std::istringstream in(text);
    try {
      read_event_csv(in);
    } catch (const DataError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message("patient_id,day,event\na,1,GP\na,2,XRAY\n").find("line 3") != std::string::npos);
  CHECK(message("patient_id,day,event\na,1,GP\na,2,XRAY\n").find("XRAY") != std::string::npos);
  CHECK(message("patient_id,day,event\na,-4,GP\n").find("line 2") != std::string::npos);
  CHECK(message("patient_id,day,event\na,1\n").find("line 2") != std::string::npos);
  CHECK(message("patient_id,day,event\na,1.5,GP\n").find("line 2") != std::string::npos);
  CHECK(message("id,when,what\n").find("line 1") != std::string::npos);
  CHECK(message("patient_id,day,event\r\na,1,GP\r\n").empty());
}

TEST_CASE("parameter files round-trip exactly") {
  std::mt19937_64 rng(6);
  for (int n : {1, 2, 3, 5}) {
    const auto p = test::random_parameters(n, rng);
    std::istringstream in(params_text(p));
    const auto back = read_parameters(in);
    CHECK(flatten_parameters(back) == flatten_parameters(p));
    CHECK(back.q.rates() == p.q.rates());
  }
  const auto bad = [](const std::string& text) -> std::string {
    std::istringstream in(text);
    try {
      read_parameters(in);
    } catch (const DataError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(bad("Q:\n0\n").find("pi:") != std::string::npos);
  CHECK(bad("pi: 1\nQ:\n0\nbeta state 1:\n1 2 3 4\n1 2 3 x\n0 0 0 0\n").find("line 6") !=
        std::string::npos);
  CHECK(bad("pi: 0.5 0.5\nQ:\n-1 1\n").find("truncated") != std::string::npos);
  CHECK(!bad("pi: 1\nQ:\n0\n").empty());
  CHECK(bad("# just a comment\npi: 1\nQ:\n0\nbeta state 1:\n0 0 0 0\n0 0 0 0\n0 0 0 0\n").empty());
}

TEST_CASE("emission report") {
  SUBCASE("reference tables reproduce cell for cell") {
    ModelParameters p = test::fixture_parameters();
    const auto rows = parse_csv(report_of(p));
    REQUIRE(rows.size() == 5);
    CHECK(rows[0][0] == "previous_event");
    CHECK(rows[0][1] == "state1_GP");
    CHECK(rows[0][12] == "state3_Spec");
    const char* printed[4][12] = {
        {"0.89", "0.07", "0.02", "0.01", "0.53", "0.09", "0.04", "0.34", "0.33", "0.40", "0.18", "0.09"},
        {"0.50", "0.32", "0.17", "0.01", "0.30", "0.32", "0.20", "0.18", "0.11", "0.57", "0.26", "0.06"},
        {"0.71", "0.15", "0.12", "0.02", "0.44", "0.16", "0.11", "0.29", "0.20", "0.48", "0.17", "0.15"},
        {"0.78", "0.05", "0.10", "0.07", "0.55", "0.07", "0.04", "0.35", "0.08", "0.19", "0.07", "0.65"}};
    const char* labels[4] = {"GP", "ED", "Hosp", "Spec"};
    for (int r = 0; r < 4; ++r) {
      REQUIRE(rows[r + 1].size() == 13);
      CHECK(rows[r + 1][0] == labels[r]);
      for (int c = 0; c < 12; ++c) CHECK(rows[r + 1][c + 1] == printed[r][c]);
    }
  }
  SUBCASE("zero coefficients give a quarter everywhere") {
    ModelParameters p = test::fixture_parameters();
    for (auto& b : p.beta) b.setZero();
    const auto rows = parse_csv(report_of(p));
    for (int r = 1; r < 5; ++r) {
      for (int c = 1; c < 13; ++c) CHECK(rows[r][c] == "0.25");
    }
  }
  SUBCASE("relabeled states give an identical file") {
    const auto p = test::fixture_parameters();
    const auto text = report_of(p);
    for (const std::vector<int>& perm : {std::vector<int>{2, 0, 1}, {1, 0, 2}, {2, 1, 0}}) {
      CHECK(report_of(permute_states(p, perm)) == text);
      CHECK(report_of(permute_states(p, perm), true) == report_of(p, true));
    }
  }
}

TEST_CASE("occupancy output") {
  const auto q = GeneratorMatrix::from_off_diagonal(test::fixture_generator());
  const auto table = state_occupancy(q, 5.0, 0.25);
  std::ostringstream s;
  write_occupancy_csv(s, table);
  const auto rows = parse_csv(s.str());
  CHECK(rows[0] == std::vector<std::string>{"start_state", "t", "state", "probability"});
  REQUIRE(rows.size() == 1 + 3 * table.times.size() * 3);
  std::map<std::pair<std::string, std::string>, double> sums;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double prob = std::stod(rows[i][3]);
    sums[{rows[i][0], rows[i][1]}] += prob;
    if (rows[i][1] == "0") CHECK(prob == (rows[i][0] == rows[i][2] ? 1.0 : 0.0));
  }
  for (const auto& [key, total] : sums) CHECK(std::abs(total - 1.0) <= 1e-9);

  std::ostringstream summary;
  write_transition_summary(summary, q, 5.0);
  std::istringstream in(summary.str());
  std::string line;
  std::getline(in, line);
  CHECK(line.find("5 years") != std::string::npos);
  std::getline(in, line);
  const Eigen::MatrixXd exact = test::reference_expm(test::fixture_generator() * 5.0);
  for (int r = 0; r < 3; ++r) {
    std::getline(in, line);
    std::istringstream ls(line);
    int label = 0;
    ls >> label;
    CHECK(label == r + 1);
    for (int c = 0; c < 3; ++c) {
      double v = 0;
      ls >> v;
      CHECK(std::abs(v - exact(r, c)) <= 1e-9);
    }
  }
}

TEST_CASE("decoded output") {
  SimConfig sim;
  sim.params = test::fixture_parameters();
  sim.n_patients = 400;
  sim.rng_seed = 42;
  const auto patients = simulate_cohort(sim);
  std::vector<DecodedTimeline> decoded;
  long hits = 0, total = 0;
  for (const auto& p : patients) {
    decoded.push_back(decode(p.timeline, sim.params));
    for (std::size_t k = 0; k < p.hidden_states.size(); ++k) {
      hits += decoded.back().observations[k].argmax_state == p.hidden_states[k];
      ++total;
    }
  }
  CHECK(static_cast<double>(hits) / total > 1.0 / 3.0);
  MESSAGE("decode accuracy " << static_cast<double>(hits) / total);

  std::ostringstream s;
  write_decoded_csv(s, decoded);
  const auto rows = parse_csv(s.str());
  CHECK(rows[0] == std::vector<std::string>{"patient_id", "time", "event", "gamma_1", "gamma_2",
                                            "gamma_3", "argmax_state"});
  std::size_t r = 1;
  for (const auto& p : patients) {
    for (const auto& o : p.timeline.observations) {
      REQUIRE(r < rows.size());
      CHECK(rows[r][0] == p.timeline.patient_id);
      CHECK(std::stod(rows[r][1]) == o.time);
      CHECK(rows[r][2] == to_string(o.event));
      const double g = std::stod(rows[r][3]) + std::stod(rows[r][4]) + std::stod(rows[r][5]);
      CHECK(std::abs(g - 1.0) <= 1e-9);
      ++r;
    }
  }
  CHECK(r == rows.size());
}

TEST_CASE("simulated CSV re-ingests to the same timelines") {
  for (bool t0 : {true, false}) {
    SimConfig sim;
    sim.params = test::fixture_parameters();
    sim.n_patients = 300;
    sim.include_t0_observation = t0;
    const auto patients = simulate_cohort(sim);
    std::stringstream csv;
    write_timeline_csv(csv, patients);
    const auto back = ingest_csv(csv);
    REQUIRE(back.timelines.size() == patients.size());
    CHECK(back.report.n_collapsed == 0);
    bool same = true;
    for (std::size_t i = 0; i < patients.size(); ++i) {
      const auto& a = patients[i].timeline;
      const auto& b = back.timelines[i];
      same &= a.patient_id == b.patient_id && a.observations.size() == b.observations.size();
      for (std::size_t k = 0; same && k < a.observations.size(); ++k) {
        same &= a.observations[k].time == b.observations[k].time &&
                a.observations[k].event == b.observations[k].event;
      }
    }
    CHECK(same);
  }
}

TEST_CASE("run configuration") {
  std::istringstream in(
      "# comment\n"
      "data = in.csv\n"
      "out=results  # trailing\n"
      "n_states=4\nseed=99\nrestarts=2\nconvergence_threshold=0.01\n"
      "execution=serial\ninclude_t0_observation=false\nhorizon=10\ngrid_step=0.5\n"
      "n_patients=7\nobservation_rate=2.5\nfull_precision=yes\n");
  const auto c = parse_run_config(in);
  CHECK(c.data == "in.csv");
  CHECK(c.out == "results");
  CHECK(c.fit.n_states == 4);
  CHECK(c.fit.rng_seed == 99);
  CHECK(c.fit.restarts == 2);
  CHECK(c.fit.convergence_threshold == 0.01);
  CHECK(c.fit.execution == Execution::Serial);
  CHECK_FALSE(c.include_t0_observation);
  CHECK(c.horizon == 10.0);
  CHECK(c.grid_step == 0.5);
  CHECK(c.n_patients == 7);
  CHECK(c.observation_rate == 2.5);
  CHECK(c.full_precision);

  const auto error = [](const std::string& text) -> std::string {
    std::istringstream s(text);
    try {
      parse_run_config(s);
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(error("seed=1\nrestart=5\n").find("config line 2") != std::string::npos);
  CHECK(error("seed=1\nrestart=5\n").find("restart") != std::string::npos);
  CHECK(error("restarts=five\n").find("config line 1") != std::string::npos);
  CHECK(!error("just words\n").empty());
  CHECK(!error("execution=gpu\n").empty());
}

TEST_CASE("commands") {
  const fs::path dir = scratch("commands");
  const fs::path params = dir / "truth_params.txt";
  spit(params, params_text(test::fixture_parameters()));
  std::ostringstream log;

  RunConfig sim;
  sim.params = params.string();
  sim.out = (dir / "sim").string();
  sim.n_patients = 200;
  sim.fit.rng_seed = 5;
  cmd_simulate(sim, log);
  const fs::path data = dir / "sim" / "timelines.csv";
  REQUIRE(fs::exists(data));
  REQUIRE(fs::exists(dir / "sim" / "truth.csv"));
  const std::string first = slurp(data);
  cmd_simulate(sim, log);
  CHECK(slurp(data) == first);
  RunConfig other = sim;
  other.fit.rng_seed = 6;
  other.out = (dir / "sim6").string();
  cmd_simulate(other, log);
  CHECK(slurp(dir / "sim6" / "timelines.csv") != first);

  SUBCASE("fit is reproducible and writes valid parameters") {
    RunConfig fit;
    fit.data = data.string();
    fit.out = (dir / "fit").string();
    fit.fit.restarts = 2;
    fit.fit.max_outer_iterations = 60;
    cmd_fit(fit, log);
    const std::string fitted = slurp(dir / "fit" / "params.txt");
    std::istringstream in(fitted);
    CHECK(validate_parameters(read_parameters(in)).empty());
    const auto trace = parse_csv(slurp(dir / "fit" / "trace.csv"));
    CHECK(trace[0] == std::vector<std::string>{"iteration", "log_likelihood"});
    CHECK(trace.size() > 2);
    CHECK(slurp(dir / "fit" / "summary.txt").find("winning restart") != std::string::npos);
    fit.out = (dir / "fit2").string();
    cmd_fit(fit, log);
    CHECK(slurp(dir / "fit2" / "params.txt") == fitted);
  }
  SUBCASE("decode, occupancy and report") {
    RunConfig c;
    c.params = params.string();
    c.data = data.string();
    c.out = (dir / "post").string();
    cmd_decode(c, log);
    cmd_occupancy(c, log);
    cmd_report_emissions(c, log);
    CHECK(fs::exists(dir / "post" / "decoded.csv"));
    CHECK(fs::exists(dir / "post" / "occupancy.csv"));
    CHECK(slurp(dir / "post" / "transition_summary.txt").find("5 years") != std::string::npos);
    CHECK(slurp(dir / "post" / "emissions.csv") == report_of(test::fixture_parameters()));
    c.grid_step = -1;
    CHECK_THROWS_AS(cmd_occupancy(c, log), DataError);
  }
  SUBCASE("corrupt input names the line") {
    const fs::path bad = dir / "bad.csv";
    spit(bad, "patient_id,day,event\na,0,GP\na,5,Dentist\n");
    RunConfig fit;
    fit.data = bad.string();
    fit.out = (dir / "badfit").string();
    try {
      cmd_fit(fit, log);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
      CHECK(exit_code_for(e) == kExitData);
    }
  }
  SUBCASE("invalid parameter files and missing paths") {
    ModelParameters broken = test::fixture_parameters();
    broken.pi(0) = 0.9;
    spit(dir / "broken.txt", params_text(broken));
    RunConfig c;
    c.params = (dir / "broken.txt").string();
    c.out = (dir / "x").string();
    CHECK_THROWS_AS(cmd_report_emissions(c, log), DataError);
    c.params = (dir / "does_not_exist.txt").string();
    CHECK_THROWS_AS(cmd_report_emissions(c, log), ConfigError);
    c.params.clear();
    CHECK_THROWS_AS(cmd_simulate(c, log), ConfigError);
  }
  SUBCASE("single patient with a frozen chain stays in one state") {
    ModelParameters frozen = test::fixture_parameters();
    frozen.q = GeneratorMatrix::zero(3);
    spit(dir / "frozen.txt", params_text(frozen));
    RunConfig c;
    c.params = (dir / "frozen.txt").string();
    c.out = (dir / "frozen").string();
    c.n_patients = 1;
    c.observation_rate = 200;
    cmd_simulate(c, log);
    const auto truth = parse_csv(slurp(dir / "frozen" / "truth.csv"));
    CHECK(truth.size() == 2);
    CHECK(truth[0] == std::vector<std::string>{"patient_id", "jump_time_years", "state"});
    CHECK(parse_csv(slurp(dir / "frozen" / "timelines.csv")).size() > 500);
  }
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 1);
  CHECK(exit_code_for(DataError("x")) == 2);
  CHECK(exit_code_for(NumericalError("x")) == 3);
  CHECK(exit_code_for(std::runtime_error("x")) == 3);
}
