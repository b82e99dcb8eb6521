#pragma once

#include <stdexcept>
#include <string>

namespace cthmm {

// Bad configuration or command-line usage.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (timelines, CSV rows, parameter files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical breakdown: non-finite matrices, kernel/posterior inconsistencies,
// estimation runs that cannot produce valid parameters.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cthmm
