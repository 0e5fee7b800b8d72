#pragma once

#include <cstdint>
#include <vector>

#include "scbf/certificates.hpp"
#include "scbf/refiner.hpp"

namespace scbf {

// Time-indexed record of one episode. Observations are not stored; they are
// reconstructed deterministically from the joint states when needed.
struct Rollout {
  ScenarioConfig config;
  Eigen::MatrixXd goals;                 // pos_dim x N
  std::vector<JointState> states;        // T+1 entries (fewer if truncated)
  std::vector<Eigen::MatrixXd> actions;  // T entries, control_dim x N
  Eigen::MatrixXd h_values;              // N x (T+1)
  Eigen::MatrixXd min_dists;             // N x (T+1)
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> safe;     // N x (T+1)
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> refined;  // N x T
  bool truncated = false;  // numeric failure ended the episode early

  int agent_count() const { return static_cast<int>(goals.cols()); }
  int recorded_states() const { return static_cast<int>(states.size()); }
  int action_steps() const { return static_cast<int>(actions.size()); }
};

struct EpisodeOptions {
  std::uint64_t seed = 0;
  double iota = 0.0;  // per-agent, per-step probability of a uniform random action
  bool refine = false;
  RefineConfig refine_cfg;
  std::vector<CbfSample>* collect = nullptr;  // when set, training samples are appended
};

// Runs one closed-loop episode under the shared policy. A NumericError from
// the integrator truncates the episode (recorded so far is kept and flagged).
Rollout run_episode(const CertificatePair& pair, const ScenarioConfig& cfg,
                    const EpisodeOptions& opts);

// Trajectory audit: the minimum over the three per-sample condition margins
// (initial-set h, dangerous-set -h, and hdot + lambda*h where h >= 0),
// recomputed from the rollout's states for the given pair. Categories with
// no samples are skipped; throws NumericError if every category is empty.
double y_value(const CertificatePair& pair, const Rollout& rollout, int agent);

}  // namespace scbf
