// Command-line front end: simulate | fit | decode | occupancy | report-emissions.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cthmm/commands.hpp"
#include "cthmm/errors.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> states;
  std::optional<double> horizon;
  std::optional<std::string> out;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "key=value run configuration")->required();
  sub->add_option("--seed", o.seed, "random seed");
  sub->add_option("--states", o.states, "number of hidden states");
  sub->add_option("--horizon", o.horizon, "horizon in years (occupancy and simulate)");
  sub->add_option("--out", o.out, "output directory");
}

cthmm::RunConfig load(const Overrides& o) {
  std::ifstream in(o.config);
  if (!in) throw cthmm::ConfigError("cannot read config '" + o.config + "'");
  cthmm::RunConfig c = cthmm::parse_run_config(in);
  if (o.seed) c.fit.rng_seed = *o.seed;
  if (o.states) c.fit.n_states = *o.states;
  if (o.horizon) {
    c.horizon = *o.horizon;
    c.horizon_years = *o.horizon;
  }
  if (o.out) c.out = *o.out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous-time hidden Markov model for irregularly timed event sequences"};
  app.require_subcommand(1);
  Overrides o;
  using Command = void (*)(const cthmm::RunConfig&, std::ostream&);
  Command command = nullptr;
  const std::pair<const char*, Command> table[] = {
      {"simulate", cthmm::cmd_simulate},
      {"fit", cthmm::cmd_fit},
      {"decode", cthmm::cmd_decode},
      {"occupancy", cthmm::cmd_occupancy},
      {"report-emissions", cthmm::cmd_report_emissions},
  };
  const char* help[] = {
      "sample a synthetic cohort from a parameter file",
      "estimate parameters by EM with random restarts",
      "posterior state marginals and most probable state per observation",
      "state occupancy curves and horizon transition matrix",
      "emission probability table by state and previous event",
  };
  for (std::size_t i = 0; i < std::size(table); ++i) {
    auto* sub = app.add_subcommand(table[i].first, help[i]);
    add_common(sub, o);
    sub->callback([&command, fn = table[i].second] { command = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cthmm::kExitOk : cthmm::kExitConfig;
  }

  try {
    command(load(o), std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cthmm::exit_code_for(e);
  }
  return cthmm::kExitOk;
}
