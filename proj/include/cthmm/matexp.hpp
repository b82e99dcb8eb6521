#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "cthmm/core_model.hpp"
#include "cthmm/execution.hpp"

namespace cthmm {

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant (degree 3 to 13, chosen from the 1-norm). Throws
/// NumericalError on non-finite input or output.
Eigen::MatrixXd matrix_exp(const Eigen::MatrixXd& a);

struct TransitionKernel {
  double dt = 0.0;
  Eigen::MatrixXd probs;  // row-stochastic exp(Q dt)
};

/// exp(Q dt) with roundoff negatives (>= -1e-12) clipped to zero and rows
/// renormalized. Throws DataError for dt <= 0 and NumericalError for larger
/// negative entries.
TransitionKernel transition_kernel(const GeneratorMatrix& q, double dt);

struct IntegralBlock {
  double dt = 0.0;
  Eigen::MatrixXd values;
};

/// Integral over s in [0, dt] of exp(Qs) e_k e_l^T exp(Q(dt - s)), read off
/// the top-right block of exp([[Q, e_k e_l^T], [0, Q]] dt).
IntegralBlock van_loan_integral(const GeneratorMatrix& q, double dt, int k, int l);

/// All N^2 Van Loan integrals contracted against an endpoint weight matrix
/// in a single 2N x 2N exponential:
///   S(k, l) = sum_{a,b} W(a, b) * van_loan_integral(q, dt, k, l)(a, b).
/// Uses B = W^T in the block matrix, since the contraction equals the (l, k)
/// entry of the integral of exp(Q(dt - s)) W^T exp(Qs).
Eigen::MatrixXd contracted_van_loan(const GeneratorMatrix& q, double dt,
                                    const Eigen::MatrixXd& weights);

// Transition kernels for a fixed generator at a sorted set of unique
// interval lengths. Read-only after construction, so lookups are safe from
// concurrent workers.
class KernelCache {
 public:
  KernelCache() = default;
  KernelCache(const GeneratorMatrix& q, std::vector<double> sorted_unique_dts,
              Execution exec = Execution::Parallel);

  std::size_t size() const { return dts_.size(); }
  const std::vector<double>& dts() const { return dts_; }
  const Eigen::MatrixXd& operator[](std::size_t index) const { return kernels_[index]; }

  // Exact-match lookup; throws std::out_of_range when dt was not cached.
  std::size_t index_of(double dt) const;
  const Eigen::MatrixXd& at(double dt) const { return kernels_[index_of(dt)]; }

 private:
  std::vector<double> dts_;
  std::vector<Eigen::MatrixXd> kernels_;
};

}  // namespace cthmm
