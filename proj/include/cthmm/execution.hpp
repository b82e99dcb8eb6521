#pragma once

namespace cthmm {

// Selects between the OpenMP kernels and their serial reference versions.
// Without OpenMP, Parallel runs the same blocked code on one thread.
enum class Execution { Serial, Parallel };

int max_threads();

}  // namespace cthmm
