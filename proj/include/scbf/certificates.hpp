#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "scbf/micrograd.hpp"
#include "scbf/world.hpp"

namespace scbf {

inline constexpr int kEncoderWidth = 64;
inline constexpr int kOwnWidth = 64;
inline constexpr int kHeadWidth = 64;

// Per-column encoder input: the relative entity state plus the relative
// planar distance as an explicit feature (the separation the safety
// predicate is defined on).
inline int encoder_input_dim(const DynamicsKind& kind) { return kind.state_dim() + 1; }
Eigen::MatrixXd augment_columns(const DynamicsKind& kind, const Eigen::MatrixXd& cols);

// One network: per-column encoder (two ReLU layers) pooled by row-wise max,
// concatenated with an embedding of the agent's own goal-relative state,
// then a two-layer head.
struct MlpParams {
  ParamBlock enc1_w, enc1_b, enc2_w, enc2_b;
  ParamBlock own_w, own_b;
  ParamBlock head1_w, head1_b, head2_w, head2_b;

  std::vector<ParamBlock*> blocks();
  std::vector<const ParamBlock*> blocks() const;
};

// Shared (h, pi) parameter pair plus the training hyperparameters. All
// agents evaluate the same pair, which is what lets a checkpoint trained at
// one agent count drive any other count.
struct CertificatePair {
  DynamicsKind kind;
  MlpParams cbf;     // scalar output
  MlpParams policy;  // control_dim outputs, squashed into bounds
  double gamma = 1e-2;  // hinge margin
  double lambda = 10.0;  // class-K slope, alpha(h) = lambda * h
  double eta = 0.1;     // goal-loss weight
  double dt = 0.03;     // shared with the dynamics timestep

  static CertificatePair init(const DynamicsKind& kind, std::uint64_t seed);
  std::vector<ParamBlock*> blocks();
  std::vector<const ParamBlock*> blocks() const;

  void save(const std::string& path) const;
  static CertificatePair load(const DynamicsKind& kind, const std::string& path);
};

// Network input for the agent itself: capped goal-relative position, then
// velocity (and tilt angles for drones). Same layout/size as the state.
Eigen::VectorXd own_features(const DynamicsKind& kind, const Eigen::VectorXd& state,
                             const Eigen::VectorXd& goal);

// h(s_i, o_i). Exactly invariant to column permutation and duplication.
double cbf_value(const CertificatePair& pair, const Eigen::VectorXd& own_feat,
                 const Observation& obs);

// pi(s_i, o_i), tanh-squashed into the control box and clamped.
Eigen::VectorXd policy_action(const CertificatePair& pair, const Eigen::VectorXd& own_feat,
                              const Observation& obs);

enum class RegionLabel { Initial, Dangerous, Other };

// One training sample: the (t, t+dt) state-observation pair plus labels and
// the reference control. next_entities holds the observed entities' absolute
// states at t+dt in the same column order as obs (entity set frozen at t).
struct CbfSample {
  Eigen::VectorXd state;
  Eigen::VectorXd goal;
  Observation obs;
  Eigen::MatrixXd next_entities;
  Eigen::VectorXd next_state;
  RegionLabel label = RegionLabel::Other;
  double min_dist = 0.0;
  Eigen::VectorXd u_ref;
  // False when a collision is imminent (small separation or short time to
  // collision). The goal-imitation term only applies to conflict-free
  // samples; a constant pull toward the reference would otherwise override
  // avoidance right where the certificate needs room to act.
  bool conflict_free = true;
};

// [h(t+dt) - h(t)] / dt evaluated on the recorded pair.
double h_dot_numeric(const CertificatePair& pair, const CbfSample& sample);

struct LossBreakdown {
  double total = 0.0;
  double lc = 0.0;       // lc_init + lc_dang + lc_deriv
  double lc_init = 0.0;  // max(0, gamma - h) over the initial/safe set
  double lc_dang = 0.0;  // max(0, gamma + h) over the dangerous set
  double lc_deriv = 0.0; // max(0, gamma - (hdot + lambda*h)) where h >= 0
  double lg = 0.0;       // sum ||pi - u_ref||_2
};

using SampleBatch = std::span<const CbfSample* const>;

// Loss values only (no gradient side effects). strict_x0 restricts the
// first hinge to samples labeled Initial; the default relaxed mode applies
// it to every non-dangerous sample.
LossBreakdown total_loss(const CertificatePair& pair, SampleBatch batch, bool strict_x0 = false);
double cbf_loss(const CertificatePair& pair, SampleBatch batch, bool strict_x0 = false);
double goal_loss(const CertificatePair& pair, SampleBatch batch);

// Forward + backward; gradients accumulate into the pair's ParamBlocks.
// The derivative hinge differentiates through both h evaluations and through
// the policy's effect on the next state (rebuilt in-graph via the Euler step).
LossBreakdown total_loss_backward(CertificatePair& pair, SampleBatch batch,
                                  bool strict_x0 = false);

// total_loss with kink-distance reporting, for finite-difference harnesses.
LossBreakdown total_loss_probe(const CertificatePair& pair, SampleBatch batch, bool strict_x0,
                               double* kink_margin);

// One supervised step fitting h to per-sample targets (sum of squared
// errors; gradients accumulate into the CBF blocks only). Used to warm-start
// the certificate at separation-margin scale, where its gradients are strong
// enough for the refiner and policy to act on.
double cbf_regression_backward(CertificatePair& pair, SampleBatch batch,
                               const std::vector<double>& targets);

// Same, for the policy head: fits the squashed action to per-sample control
// targets (mean squared error over channels; policy blocks only).
double policy_regression_backward(CertificatePair& pair, SampleBatch batch,
                                  const Eigen::MatrixXd& targets);

}  // namespace scbf
