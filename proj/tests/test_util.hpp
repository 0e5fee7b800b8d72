#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "scbf/certificates.hpp"
#include "scbf/rng.hpp"
#include "scbf/world.hpp"

namespace scbf::testutil {

inline std::string scenario_path(const std::string& name) {
  return std::string(SCBF_SCENARIO_DIR) + "/" + name;
}

inline std::string temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("scbf_test_" + tag);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline Eigen::VectorXd random_state(const DynamicsKind& kind, Rng& rng, double span = 2.0) {
  Eigen::VectorXd s(kind.state_dim());
  const int pd = kind.pos_dim();
  for (int i = 0; i < pd; ++i) s(i) = rng.uniform(-span, span);
  for (int i = pd; i < 2 * pd; ++i) s(i) = rng.uniform(-2.0, 2.0);
  for (int i = 2 * pd; i < kind.state_dim(); ++i) s(i) = rng.uniform(-0.5, 0.5);
  return s;
}

inline Observation random_observation(const DynamicsKind& kind, Rng& rng, int k) {
  Observation obs;
  obs.columns.resize(kind.state_dim(), k);
  for (int c = 0; c < k; ++c) {
    obs.columns.col(c) = random_state(kind, rng) - random_state(kind, rng);
    obs.kinds.push_back(rng.uniform() < 0.8 ? EntityKind::Agent : EntityKind::Obstacle);
  }
  return obs;
}

// Synthetic but physically plausible training sample: entities drift by
// their relative velocity over one dt, the own next state follows an Euler
// step under a random in-bounds action.
inline CbfSample random_sample(const DynamicsKind& kind, Rng& rng, int k) {
  CbfSample s;
  s.state = random_state(kind, rng);
  s.goal = Eigen::VectorXd(kind.pos_dim());
  for (int i = 0; i < kind.pos_dim(); ++i) s.goal(i) = rng.uniform(-2.0, 2.0);
  s.obs = random_observation(kind, rng, k);
  Eigen::VectorXd u(kind.control_dim());
  for (int c = 0; c < kind.control_dim(); ++c)
    u(c) = rng.uniform(kind.control_low(c), kind.control_high(c));
  s.next_state = step(kind, s.state, u, kind.dt);
  s.next_entities.resize(kind.state_dim(), k);
  for (int c = 0; c < k; ++c) {
    Eigen::VectorXd entity = s.obs.columns.col(c) + s.state;
    entity.head(kind.pos_dim()) += kind.dt * entity.segment(kind.pos_dim(), kind.pos_dim());
    s.next_entities.col(c) = entity;
  }
  double min_dist = 10.0;
  for (int c = 0; c < k; ++c)
    min_dist = std::min(min_dist, s.obs.columns.col(c).head(kind.pos_dim()).norm());
  s.min_dist = min_dist;
  s.label = min_dist < 0.1414 ? RegionLabel::Dangerous
            : rng.uniform() < 0.2 ? RegionLabel::Initial
                                  : RegionLabel::Other;
  s.conflict_free = min_dist >= 3.0 * 0.1414;
  s.u_ref = Eigen::VectorXd(kind.control_dim());
  for (int c = 0; c < kind.control_dim(); ++c)
    s.u_ref(c) = rng.uniform(kind.control_low(c), kind.control_high(c));
  return s;
}

inline std::vector<const CbfSample*> batch_view(const std::vector<CbfSample>& samples) {
  std::vector<const CbfSample*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

}  // namespace scbf::testutil
