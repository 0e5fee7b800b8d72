#pragma once

#include <vector>

#include "scbf/certificates.hpp"

namespace scbf {

struct RefineConfig {
  double mu = 1.0;          // ||e||^2 regularization weight
  double step_size = 0.1;   // gradient step on e, halved on non-decrease
  int max_iters = 20;
  bool enabled = true;
  double tolerance = 1e-6;  // stop once the violation hinge is this small
  bool adaptive_mu = false; // double mu whenever the control clamp binds
};

// Test-time surrogate for one refinement decision. next_entities holds the
// observed entities' predicted absolute states at t+dt: each neighbor's last
// observed displacement replayed once, obstacles static.
struct RefineContext {
  Eigen::VectorXd state;
  Eigen::VectorXd goal;
  Observation obs;
  Eigen::MatrixXd next_entities;
};

// phi(e) = max(0, -(hdot + lambda*h)) + mu*||e||^2, with hdot the numeric
// difference quotient through step(state, u + e, dt) against the predicted
// entity motion.
double phi(const CertificatePair& pair, const RefineContext& ctx,
           const Eigen::VectorXd& control, const Eigen::VectorXd& e, double mu);

struct RefineResult {
  Eigen::VectorXd control;   // clamp(u + e)
  bool triggered = false;    // phi(0) > 0, i.e. the condition was violated
  bool fell_back = false;    // non-finite iterate, original control returned
  int iterations = 0;
  double final_violation = 0.0;
  std::vector<double> violation_history;  // accepted iterates, starting at e=0
};

RefineResult refine(const CertificatePair& pair, const RefineContext& ctx,
                    const Eigen::VectorXd& control, const RefineConfig& cfg);

}  // namespace scbf
