#pragma once

// Internal: the scaled forward-backward recursion shared by the inference
// API and the fused EM E-step.

#include <vector>

#include <Eigen/Dense>

#include "cthmm/core_model.hpp"
#include "cthmm/emission.hpp"

namespace cthmm::detail {

// Emission tables of every state, computed once per parameter set.
std::vector<EmissionTable> state_emission_tables(const ModelParameters& params);

struct ForwardBackwardWork {
  Eigen::MatrixXd b;      // N x T emission likelihoods
  Eigen::MatrixXd alpha;  // N x T, columns sum to one
  Eigen::MatrixXd beta;   // N x T, scaled by the forward normalizers
  Eigen::VectorXd scale;  // forward normalizers c_t
};

void fill_emissions(const PatientTimeline& timeline, const std::vector<EmissionTable>& tables,
                    Eigen::MatrixXd& b);

// Runs both passes and returns the log-likelihood. kernels[i] is the
// transition matrix of interval i (between observations i and i + 1).
double forward_backward_pass(const PatientTimeline& timeline, const Eigen::VectorXd& pi,
                             const std::vector<EmissionTable>& tables,
                             const std::vector<const Eigen::MatrixXd*>& kernels,
                             ForwardBackwardWork& work);

// Normalized gamma at observation t.
Eigen::VectorXd gamma_at(const ForwardBackwardWork& work, Eigen::Index t);

// Normalized xi for interval t (observations t and t + 1).
Eigen::MatrixXd xi_at(const ForwardBackwardWork& work, const Eigen::MatrixXd& kernel,
                      Eigen::Index t);

}  // namespace cthmm::detail
