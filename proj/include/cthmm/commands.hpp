#pragma once

#include <ostream>

#include "cthmm/io.hpp"

namespace cthmm {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

// Each command reads its inputs from the paths in `config`, writes into
// config.out and prints a short summary to `log`. Errors propagate as
// ConfigError / DataError / NumericalError.
void cmd_simulate(const RunConfig& config, std::ostream& log);
void cmd_fit(const RunConfig& config, std::ostream& log);
void cmd_decode(const RunConfig& config, std::ostream& log);
void cmd_occupancy(const RunConfig& config, std::ostream& log);
void cmd_report_emissions(const RunConfig& config, std::ostream& log);

// Maps an exception thrown by a command to an exit code.
int exit_code_for(const std::exception& e);

}  // namespace cthmm
