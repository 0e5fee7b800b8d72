#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scbf/rollout.hpp"

namespace scbf {

struct EpisodeMetrics {
  double safety_rate = 0.0, safety_rate_std = 0.0;
  double mean_reward = 0.0, reward_std = 0.0;
  double goal_reached_fraction = 0.0, goal_fraction_std = 0.0;
  double opr_proportion = 0.0, opr_std = 0.0;
  double eps_hat = 0.0;                   // pooled over (agent, episode)
  std::vector<double> eps_hat_per_agent;  // violation rate per agent index
  long steps = 0;                         // total recorded sim steps
  double wall_time = 0.0;                 // seconds
  int episodes = 0;
  std::vector<double> ep_safety, ep_reward, ep_goal, ep_opr;
};

// Mean over agents of the per-agent fraction of safe timesteps.
double safety_rate(const Rollout& rollout);

// Per agent: +10 once upon first reaching the goal threshold, -1 per entry
// into the dangerous set (safe->unsafe transition); mean over agents.
// per_step_danger charges -1 for every unsafe step instead.
double reward(const Rollout& rollout, bool per_step_danger = false);

double goal_fraction(const Rollout& rollout);
double opr_fraction(const Rollout& rollout);

// Fraction of (agent, trajectory) pairs with y_value <= 0.
double eps_hat(const CertificatePair& pair, const std::vector<Rollout>& rollouts);
std::vector<double> eps_hat_per_agent(const CertificatePair& pair,
                                      const std::vector<Rollout>& rollouts);

// Min over agents of their decentralized CBF values at a joint state.
double global_cbf(const CertificatePair& pair, const JointState& states,
                  const ScenarioConfig& cfg, const Eigen::MatrixXd& goals);

// Two-agent slice through the certificate: h over a grid of (relative
// distance, closing speed). The configuration family is canonical head-on
// flight along +x: the observer cruises at c/2 toward a waypoint 2.5 m ahead
// of it, the neighbor closes at rate c.
struct LandscapeSpec {
  double r_min = 0.02, r_max = 1.414;
  double c_min = -3.0, c_max = 3.0;
  int n_r = 40, n_c = 40;
};

double landscape_point(const CertificatePair& pair, double rel_distance, double closing_speed,
                       int perspective = 0);
Eigen::MatrixXd landscape(const CertificatePair& pair, const LandscapeSpec& spec);
void write_landscape_csv(const std::string& path, const LandscapeSpec& spec,
                         const Eigen::MatrixXd& grid);

// Seeded closed-loop evaluation; episodes run in parallel across jobs
// workers and aggregate in episode order, so results depend only on seeds.
EpisodeMetrics evaluate(const CertificatePair& pair, const ScenarioConfig& cfg, int episodes,
                        bool refine, std::uint64_t seed, int jobs = 1,
                        std::vector<Rollout>* keep_rollouts = nullptr);

void write_metrics_json(const std::string& path, const EpisodeMetrics& metrics,
                        const ScenarioConfig& cfg, bool refine, std::uint64_t seed,
                        const std::string& checkpoint_hash);

void write_trajectories_csv(const std::string& path, const std::vector<Rollout>& rollouts);

}  // namespace scbf
