#include "cthmm/execution.hpp"

#ifdef CTHMM_HAVE_OPENMP
#include <omp.h>
#endif

namespace cthmm {

int max_threads() {
#ifdef CTHMM_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace cthmm
