#include "cthmm/matexp.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <stdexcept>
#include <string>

#include "cthmm/errors.hpp"

namespace cthmm {

namespace {

double one_norm(const Eigen::MatrixXd& a) { return a.cwiseAbs().colwise().sum().maxCoeff(); }

// Diagonal Padé approximants r_m = (V - U)^{-1} (V + U) of degree m, with the
// backward-error thresholds theta_m for double precision.
struct PadeTerms {
  Eigen::MatrixXd u;
  Eigen::MatrixXd v;
};

PadeTerms pade3(const Eigen::MatrixXd& a) {
  constexpr double b[] = {120.0, 60.0, 12.0, 1.0};
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd a2 = a * a;
  return {a * (b[3] * a2 + b[1] * id), b[2] * a2 + b[0] * id};
}

PadeTerms pade5(const Eigen::MatrixXd& a) {
  constexpr double b[] = {30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0};
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd a2 = a * a;
  const Eigen::MatrixXd a4 = a2 * a2;
  return {a * (b[5] * a4 + b[3] * a2 + b[1] * id), b[4] * a4 + b[2] * a2 + b[0] * id};
}

PadeTerms pade7(const Eigen::MatrixXd& a) {
  constexpr double b[] = {17297280.0, 8648640.0, 1995840.0, 277200.0,
                          25200.0,    1512.0,    56.0,      1.0};
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd a2 = a * a;
  const Eigen::MatrixXd a4 = a2 * a2;
  const Eigen::MatrixXd a6 = a4 * a2;
  return {a * (b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id),
          b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id};
}

PadeTerms pade9(const Eigen::MatrixXd& a) {
  constexpr double b[] = {17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
                          2162160.0,     110880.0,     3960.0,       90.0,        1.0};
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd a2 = a * a;
  const Eigen::MatrixXd a4 = a2 * a2;
  const Eigen::MatrixXd a6 = a4 * a2;
  const Eigen::MatrixXd a8 = a6 * a2;
  return {a * (b[9] * a8 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id),
          b[8] * a8 + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id};
}

PadeTerms pade13(const Eigen::MatrixXd& a) {
  constexpr double b[] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                          1187353796428800.0,  129060195264000.0,   10559470521600.0,
                          670442572800.0,      33522128640.0,       1323241920.0,
                          40840800.0,          960960.0,            16380.0,
                          182.0,               1.0};
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd a2 = a * a;
  const Eigen::MatrixXd a4 = a2 * a2;
  const Eigen::MatrixXd a6 = a4 * a2;
  const Eigen::MatrixXd inner_u = b[13] * a6 + b[11] * a4 + b[9] * a2;
  const Eigen::MatrixXd inner_v = b[12] * a6 + b[10] * a4 + b[8] * a2;
  return {a * (a6 * inner_u + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id),
          a6 * inner_v + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id};
}

Eigen::MatrixXd pade_ratio(const PadeTerms& t) {
  return (t.v - t.u).partialPivLu().solve(t.v + t.u);
}

}  // namespace

Eigen::MatrixXd matrix_exp(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw NumericalError("matrix_exp: matrix is not square");
  if (!a.allFinite()) throw NumericalError("matrix_exp: matrix has non-finite entries");
  if (a.size() == 0) return a;

  const double norm = one_norm(a);
  Eigen::MatrixXd result;
  if (norm <= 1.495585217958292e-2) {
    result = pade_ratio(pade3(a));
  } else if (norm <= 2.539398330063230e-1) {
    result = pade_ratio(pade5(a));
  } else if (norm <= 9.504178996162932e-1) {
    result = pade_ratio(pade7(a));
  } else if (norm <= 2.097847961257068) {
    result = pade_ratio(pade9(a));
  } else {
    constexpr double theta13 = 5.371920351148152;
    int squarings = std::max(0, static_cast<int>(std::ceil(std::log2(norm / theta13))));
    result = pade_ratio(pade13(a * std::ldexp(1.0, -squarings)));
    for (int i = 0; i < squarings; ++i) result = result * result;
  }
  if (!result.allFinite()) throw NumericalError("matrix_exp: result overflowed");
  return result;
}

TransitionKernel transition_kernel(const GeneratorMatrix& q, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) {
    throw DataError("transition_kernel: interval length must be positive, got " +
                    std::to_string(dt));
  }
  Eigen::MatrixXd p = matrix_exp(q.rates() * dt);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (p(i, j) < 0.0) {
        if (p(i, j) < -1e-12) {
          throw NumericalError("transition_kernel: entry (" + std::to_string(i + 1) + "," +
                               std::to_string(j + 1) + ") is " + std::to_string(p(i, j)));
        }
        p(i, j) = 0.0;
      }
    }
    p.row(i) /= p.row(i).sum();
  }
  return {dt, std::move(p)};
}

namespace {

Eigen::MatrixXd van_loan_block(const GeneratorMatrix& q, double dt, const Eigen::MatrixXd& b) {
  if (!(dt > 0.0) || !std::isfinite(dt)) {
    throw DataError("van_loan_integral: interval length must be positive, got " +
                    std::to_string(dt));
  }
  const Eigen::Index n = q.n_states();
  Eigen::MatrixXd block = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  block.topLeftCorner(n, n) = q.rates() * dt;
  block.bottomRightCorner(n, n) = q.rates() * dt;
  block.topRightCorner(n, n) = b * dt;
  return matrix_exp(block).topRightCorner(n, n);
}

}  // namespace

IntegralBlock van_loan_integral(const GeneratorMatrix& q, double dt, int k, int l) {
  const int n = q.n_states();
  if (k < 0 || k >= n || l < 0 || l >= n) {
    throw DataError("van_loan_integral: state index out of range");
  }
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, n);
  b(k, l) = 1.0;
  return {dt, van_loan_block(q, dt, b)};
}

Eigen::MatrixXd contracted_van_loan(const GeneratorMatrix& q, double dt,
                                    const Eigen::MatrixXd& weights) {
  return van_loan_block(q, dt, weights.transpose()).transpose();
}

KernelCache::KernelCache(const GeneratorMatrix& q, std::vector<double> sorted_unique_dts,
                         Execution exec)
    : dts_(std::move(sorted_unique_dts)), kernels_(dts_.size()) {
  const auto count = static_cast<long>(dts_.size());
  if (exec == Execution::Parallel) {
    // First exception wins; the rest of the loop still runs to completion.
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16)
    for (long i = 0; i < count; ++i) {
      try {
        kernels_[i] = transition_kernel(q, dts_[i]).probs;
      } catch (...) {
#pragma omp critical(cthmm_kernel_cache)
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
  } else {
    for (long i = 0; i < count; ++i) kernels_[i] = transition_kernel(q, dts_[i]).probs;
  }
}

std::size_t KernelCache::index_of(double dt) const {
  auto it = std::lower_bound(dts_.begin(), dts_.end(), dt);
  if (it == dts_.end() || *it != dt) {
    throw std::out_of_range("KernelCache: interval length " + std::to_string(dt) +
                            " not cached");
  }
  return static_cast<std::size_t>(it - dts_.begin());
}

}  // namespace cthmm
