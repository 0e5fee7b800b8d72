#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "scbf/dynamics.hpp"
#include "scbf/rng.hpp"

namespace scbf {

// Axis-aligned box, pos_dim components.
struct Box {
  Eigen::VectorXd low, high;
  bool contains(const Eigen::VectorXd& p) const;
  Eigen::VectorXd closest_point(const Eigen::VectorXd& p) const;
  double surface_distance(const Eigen::VectorXd& p) const;  // 0 inside
};

enum class EntityKind { Agent, Obstacle };
enum class SpawnMode { Random, HeadOn };

// Joint state: one agent state per column (state_dim x n_agents).
using JointState = Eigen::MatrixXd;

struct ScenarioConfig {
  DynamicsKind dynamics;
  int n_agents = 2;
  Box arena;
  std::vector<Box> obstacles;
  double safe_distance = 0.1414;
  double obs_radius = 1.414;  // 10 * safe_distance by convention
  double goal_threshold = 0.1414;
  int episode_steps = 300;
  bool density_scaling = true;
  SpawnMode spawn_mode = SpawnMode::Random;

  void validate() const;
  // Returns a copy configured for n agents. With density_scaling the arena
  // (and all obstacle geometry) is stretched linearly so area (2D) or volume
  // (3D) stays proportional to the agent count.
  ScenarioConfig with_agents(int n) const;

  static ScenarioConfig load(const std::string& path);
  void save(const std::string& path) const;
  std::string to_json_string() const;
};

// Variable-width local observation: one column per observed entity, each
// column the entity state relative to the observer (all state components).
// Obstacle proxies sit at the closest surface point with zero velocity (and
// zero tilt in 3D) before the relative shift.
struct Observation {
  Eigen::MatrixXd columns;  // state_dim x k
  std::vector<EntityKind> kinds;
  int count() const { return static_cast<int>(columns.cols()); }
};

struct SafetyLabel {
  double min_dist = 0.0;
  bool safe = true;
};

// Uniform spatial-hash grid with cell size = radius; built once per step,
// then queried read-only from any thread.
class NeighborIndex {
 public:
  NeighborIndex(const JointState& states, int pos_dim, double radius);
  // Agents j != i with ||pos_j - pos_i|| <= radius, ascending.
  std::vector<int> query(int i) const;

 private:
  struct Impl;
  Eigen::MatrixXd positions_;
  double radius_;
  int pos_dim_;
  std::vector<std::pair<std::uint64_t, int>> cells_;  // sorted (cell key, agent)
  std::uint64_t key_of(const Eigen::VectorXd& p) const;
};

std::vector<int> neighbors(const JointState& states, int i, int pos_dim, double radius);

Observation observe(const JointState& states, int i, const ScenarioConfig& cfg,
                    const NeighborIndex& index);
double min_distance(const JointState& states, int i, const ScenarioConfig& cfg,
                    const NeighborIndex& index);
SafetyLabel safety_label(const JointState& states, int i, const ScenarioConfig& cfg,
                         const NeighborIndex& index);

// Far goals are chased through a waypoint at this distance, which bounds
// cruise speed independently of arena size.
inline constexpr double kGoalWaypointCap = 2.0;

// Error coordinates fed to the LQR gain (and to the policy networks):
// capped goal-relative position, then velocity, then tilt for drones.
Eigen::VectorXd goal_error(const DynamicsKind& kind, const Eigen::VectorXd& state,
                           const Eigen::VectorXd& goal);

struct LqrData {
  Eigen::MatrixXd K;  // control = -K * goal_error
  Eigen::MatrixXd P;  // Riccati solution, Lyapunov form err'*P*err
};
const LqrData& lqr_data(const DynamicsKind& kind);

// Goal-reaching reference controller u^g: infinite-horizon LQR on the
// double-integrator model (2D) or on the hover linearization (3D), output
// clamped to the control bounds.
Eigen::VectorXd reference_control(const DynamicsKind& kind, const Eigen::VectorXd& state,
                                  const Eigen::VectorXd& goal);

struct SpawnResult {
  JointState states;      // state_dim x n
  Eigen::MatrixXd goals;  // pos_dim x n
};

// Rejection-sampled start/goal positions: inside the arena, clear of
// obstacles, pairwise >= 3 * safe_distance; zero velocity and tilt.
// Deterministic given the seed. Throws PlacementError after 1e5 rejections.
SpawnResult spawn(const ScenarioConfig& cfg, std::uint64_t seed);

}  // namespace scbf
