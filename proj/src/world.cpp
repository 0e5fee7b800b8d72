#include "scbf/world.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>

namespace scbf {

bool Box::contains(const Eigen::VectorXd& p) const {
  for (Eigen::Index i = 0; i < low.size(); ++i)
    if (p(i) < low(i) || p(i) > high(i)) return false;
  return true;
}

Eigen::VectorXd Box::closest_point(const Eigen::VectorXd& p) const {
  return p.cwiseMax(low).cwiseMin(high);
}

double Box::surface_distance(const Eigen::VectorXd& p) const {
  return (p - closest_point(p)).norm();
}

void ScenarioConfig::validate() const {
  const int pd = dynamics.pos_dim();
  if (n_agents < 1) throw ConfigError("n_agents must be >= 1");
  if (arena.low.size() != pd || arena.high.size() != pd)
    throw ConfigError("arena dimensionality does not match dynamics");
  for (Eigen::Index i = 0; i < arena.low.size(); ++i)
    if (!(arena.low(i) < arena.high(i))) throw ConfigError("arena low must be < high");
  for (const Box& b : obstacles) {
    if (b.low.size() != pd || b.high.size() != pd)
      throw ConfigError("obstacle dimensionality does not match dynamics");
    for (Eigen::Index i = 0; i < b.low.size(); ++i)
      if (!(b.low(i) < b.high(i))) throw ConfigError("obstacle low must be < high");
  }
  if (!(safe_distance > 0.0)) throw ConfigError("safe_distance must be positive");
  if (!(obs_radius > 0.0)) throw ConfigError("obs_radius must be positive");
  if (!(goal_threshold > 0.0)) throw ConfigError("goal_threshold must be positive");
  if (episode_steps < 1) throw ConfigError("episode_steps must be >= 1");
  if (dynamics.control_low.size() != dynamics.control_dim() ||
      dynamics.control_high.size() != dynamics.control_dim())
    throw ConfigError("control bounds dimensionality mismatch");
  for (Eigen::Index i = 0; i < dynamics.control_low.size(); ++i)
    if (!(dynamics.control_low(i) < dynamics.control_high(i)))
      throw ConfigError("control_low must be < control_high");
  if (dynamics.model == DynamicsModel::Drone3D && !(dynamics.gravity > 0.0))
    throw ConfigError("gravity must be positive for Drone3D");
  if (spawn_mode == SpawnMode::HeadOn && n_agents % 2 != 0)
    throw ConfigError("head-on spawn requires an even agent count");
}

ScenarioConfig ScenarioConfig::with_agents(int n) const {
  if (n < 1) throw ConfigError("agent count must be >= 1");
  ScenarioConfig out = *this;
  out.n_agents = n;
  if (!density_scaling || n == n_agents) return out;
  const double ratio = static_cast<double>(n) / static_cast<double>(n_agents);
  const double stretch = std::pow(ratio, 1.0 / static_cast<double>(dynamics.pos_dim()));
  const Eigen::VectorXd origin = arena.low;
  out.arena.high = origin + (arena.high - origin) * stretch;
  for (Box& b : out.obstacles) {
    b.low = origin + (b.low - origin) * stretch;
    b.high = origin + (b.high - origin) * stretch;
  }
  return out;
}

namespace {

Eigen::VectorXd vec_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw ConfigError(std::string(what) + " must be an array");
  Eigen::VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j.at(i).get<double>();
  return v;
}

nlohmann::json vec_to_json(const Eigen::VectorXd& v) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

}  // namespace

ScenarioConfig ScenarioConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("unreadable scenario " + path + ": " + e.what());
  }
  ScenarioConfig cfg;
  try {
    const auto& dj = j.at("dynamics");
    const auto model = dynamics_model_from_name(dj.at("tag").get<std::string>());
    cfg.dynamics = model == DynamicsModel::DoubleIntegrator2D ? DynamicsKind::double_integrator_2d()
                                                              : DynamicsKind::drone_3d();
    if (dj.contains("gravity")) cfg.dynamics.gravity = dj["gravity"].get<double>();
    if (dj.contains("control_low")) cfg.dynamics.control_low = vec_from_json(dj["control_low"], "control_low");
    if (dj.contains("control_high"))
      cfg.dynamics.control_high = vec_from_json(dj["control_high"], "control_high");
    if (dj.contains("dt")) cfg.dynamics.dt = dj["dt"].get<double>();
    cfg.n_agents = j.at("n_agents").get<int>();
    cfg.arena.low = vec_from_json(j.at("arena").at("low"), "arena.low");
    cfg.arena.high = vec_from_json(j.at("arena").at("high"), "arena.high");
    if (j.contains("obstacles"))
      for (const auto& oj : j["obstacles"]) {
        Box b;
        b.low = vec_from_json(oj.at("low"), "obstacle.low");
        b.high = vec_from_json(oj.at("high"), "obstacle.high");
        cfg.obstacles.push_back(std::move(b));
      }
    cfg.safe_distance = j.at("safe_distance").get<double>();
    cfg.obs_radius = j.at("obs_radius").get<double>();
    cfg.goal_threshold = j.at("goal_threshold").get<double>();
    cfg.episode_steps = j.at("episode_steps").get<int>();
    cfg.density_scaling = j.at("density_scaling").get<bool>();
    if (j.contains("spawn")) {
      const std::string s = j["spawn"].get<std::string>();
      if (s == "random")
        cfg.spawn_mode = SpawnMode::Random;
      else if (s == "headon")
        cfg.spawn_mode = SpawnMode::HeadOn;
      else
        throw ConfigError("unknown spawn mode: " + s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid scenario " + path + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string ScenarioConfig::to_json_string() const {
  nlohmann::json j;
  j["dynamics"]["tag"] = dynamics_model_name(dynamics.model);
  if (dynamics.model == DynamicsModel::Drone3D) j["dynamics"]["gravity"] = dynamics.gravity;
  j["dynamics"]["control_low"] = vec_to_json(dynamics.control_low);
  j["dynamics"]["control_high"] = vec_to_json(dynamics.control_high);
  j["dynamics"]["dt"] = dynamics.dt;
  j["n_agents"] = n_agents;
  j["arena"]["low"] = vec_to_json(arena.low);
  j["arena"]["high"] = vec_to_json(arena.high);
  j["obstacles"] = nlohmann::json::array();
  for (const Box& b : obstacles) {
    nlohmann::json oj;
    oj["low"] = vec_to_json(b.low);
    oj["high"] = vec_to_json(b.high);
    j["obstacles"].push_back(std::move(oj));
  }
  j["safe_distance"] = safe_distance;
  j["obs_radius"] = obs_radius;
  j["goal_threshold"] = goal_threshold;
  j["episode_steps"] = episode_steps;
  j["density_scaling"] = density_scaling;
  j["spawn"] = spawn_mode == SpawnMode::Random ? "random" : "headon";
  return j.dump(2);
}

void ScenarioConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open scenario for writing: " + path);
  out << to_json_string() << "\n";
}

// ---- neighbor index ----------------------------------------------------

NeighborIndex::NeighborIndex(const JointState& states, int pos_dim, double radius)
    : radius_(radius), pos_dim_(pos_dim) {
  if (!(radius > 0.0)) throw ConfigError("neighbor radius must be positive");
  positions_ = states.topRows(pos_dim);
  cells_.reserve(static_cast<size_t>(states.cols()));
  for (int i = 0; i < states.cols(); ++i)
    cells_.emplace_back(key_of(positions_.col(i)), i);
  std::sort(cells_.begin(), cells_.end());
}

std::uint64_t NeighborIndex::key_of(const Eigen::VectorXd& p) const {
  // 21 bits per axis around a large offset; arenas here are far smaller.
  std::uint64_t key = 0;
  for (int d = 0; d < pos_dim_; ++d) {
    const auto c = static_cast<std::int64_t>(std::floor(p(d) / radius_)) + (1 << 20);
    key = (key << 21) | static_cast<std::uint64_t>(c & ((1 << 21) - 1));
  }
  return key;
}

std::vector<int> NeighborIndex::query(int i) const {
  std::vector<int> out;
  const Eigen::VectorXd p = positions_.col(i);
  Eigen::VectorXd q = p;
  const int span = pos_dim_ == 2 ? 9 : 27;
  for (int cell = 0; cell < span; ++cell) {
    int rem = cell;
    for (int d = 0; d < pos_dim_; ++d) {
      q(d) = p(d) + radius_ * static_cast<double>(rem % 3 - 1);
      rem /= 3;
    }
    const std::uint64_t key = key_of(q);
    auto it = std::lower_bound(cells_.begin(), cells_.end(), std::make_pair(key, -1));
    for (; it != cells_.end() && it->first == key; ++it) {
      const int j = it->second;
      if (j == i) continue;
      if ((positions_.col(j) - p).norm() <= radius_) out.push_back(j);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> neighbors(const JointState& states, int i, int pos_dim, double radius) {
  return NeighborIndex(states, pos_dim, radius).query(i);
}

// ---- observation and safety --------------------------------------------

Observation observe(const JointState& states, int i, const ScenarioConfig& cfg,
                    const NeighborIndex& index) {
  const int n = cfg.dynamics.state_dim();
  const int pd = cfg.dynamics.pos_dim();
  const Eigen::VectorXd own = states.col(i);
  const std::vector<int> near = index.query(i);

  std::vector<int> near_obstacles;
  for (size_t o = 0; o < cfg.obstacles.size(); ++o)
    if (cfg.obstacles[o].surface_distance(own.head(pd)) <= cfg.obs_radius)
      near_obstacles.push_back(static_cast<int>(o));

  Observation obs;
  obs.columns.resize(n, static_cast<Eigen::Index>(near.size() + near_obstacles.size()));
  obs.kinds.reserve(near.size() + near_obstacles.size());
  Eigen::Index c = 0;
  for (int j : near) {
    obs.columns.col(c++) = states.col(j) - own;
    obs.kinds.push_back(EntityKind::Agent);
  }
  for (int o : near_obstacles) {
    Eigen::VectorXd entity = Eigen::VectorXd::Zero(n);
    entity.head(pd) = cfg.obstacles[static_cast<size_t>(o)].closest_point(own.head(pd));
    obs.columns.col(c++) = entity - own;
    obs.kinds.push_back(EntityKind::Obstacle);
  }
  return obs;
}

double min_distance(const JointState& states, int i, const ScenarioConfig& cfg,
                    const NeighborIndex& index) {
  const int pd = cfg.dynamics.pos_dim();
  const Eigen::VectorXd p = states.col(i).head(pd);
  double best = cfg.obs_radius;  // vacuous-minimum sentinel
  for (int j : index.query(i)) best = std::min(best, (states.col(j).head(pd) - p).norm());
  for (const Box& b : cfg.obstacles) {
    const double d = b.surface_distance(p);
    if (d <= cfg.obs_radius) best = std::min(best, d);
  }
  return best;
}

SafetyLabel safety_label(const JointState& states, int i, const ScenarioConfig& cfg,
                         const NeighborIndex& index) {
  SafetyLabel lbl;
  lbl.min_dist = min_distance(states, i, cfg, index);
  lbl.safe = lbl.min_dist >= cfg.safe_distance;
  return lbl;
}

// ---- LQR reference ------------------------------------------------------

Eigen::VectorXd goal_error(const DynamicsKind& kind, const Eigen::VectorXd& state,
                           const Eigen::VectorXd& goal) {
  const int pd = kind.pos_dim();
  if (goal.size() != pd) throw ConfigError("goal dimensionality mismatch");
  Eigen::VectorXd rel = state.head(pd) - goal;
  const double dist = rel.norm();
  if (dist > kGoalWaypointCap) rel *= kGoalWaypointCap / dist;
  Eigen::VectorXd err(kind.state_dim());
  if (kind.model == DynamicsModel::DoubleIntegrator2D)
    err << rel, state.segment(2, 2);
  else
    err << rel, state.segment(3, 3), state.segment(6, 2);
  return err;
}

namespace {

// Continuous-time algebraic Riccati equation via the stable invariant
// subspace of the Hamiltonian.
Eigen::MatrixXd solve_care(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                           const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R) {
  const Eigen::Index n = A.rows();
  Eigen::MatrixXd H(2 * n, 2 * n);
  const Eigen::MatrixXd Rinv = R.inverse();
  H.topLeftCorner(n, n) = A;
  H.topRightCorner(n, n) = -B * Rinv * B.transpose();
  H.bottomLeftCorner(n, n) = -Q;
  H.bottomRightCorner(n, n) = -A.transpose();
  Eigen::ComplexEigenSolver<Eigen::MatrixXd> es(H);
  if (es.info() != Eigen::Success) throw NumericError("CARE eigensolver failed");
  Eigen::MatrixXcd U(2 * n, n);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < 2 * n && k < n; ++i)
    if (es.eigenvalues()(i).real() < 0.0) U.col(k++) = es.eigenvectors().col(i);
  if (k != n) throw NumericError("CARE: stable subspace has wrong dimension");
  const Eigen::MatrixXcd X = U.topRows(n);
  const Eigen::MatrixXcd Y = U.bottomRows(n);
  Eigen::MatrixXd P = (Y * X.inverse()).real();
  return 0.5 * (P + P.transpose());
}

LqrData make_lqr(const DynamicsKind& kind) {
  const int n = kind.state_dim();
  const int m = kind.control_dim();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(n, m);
  Eigen::VectorXd qdiag(n), rdiag(m);
  if (kind.model == DynamicsModel::DoubleIntegrator2D) {
    A(0, 2) = 1.0;
    A(1, 3) = 1.0;
    B(2, 0) = 1.0;
    B(3, 1) = 1.0;
    qdiag << 1.0, 1.0, 0.1, 0.1;
    rdiag << 2.0, 2.0;
  } else {
    A.block(0, 3, 3, 3).setIdentity();
    A(3, 6) = kind.gravity;
    A(4, 7) = kind.gravity;
    B(5, 2) = 1.0;  // az
    B(6, 0) = 1.0;  // wx
    B(7, 1) = 1.0;  // wy
    qdiag << 1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1, 0.1;
    rdiag << 2.0, 2.0, 0.5;
  }
  const Eigen::MatrixXd Q = qdiag.asDiagonal();
  const Eigen::MatrixXd R = rdiag.asDiagonal();
  LqrData data;
  data.P = solve_care(A, B, Q, R);
  data.K = R.inverse() * B.transpose() * data.P;
  return data;
}

}  // namespace

const LqrData& lqr_data(const DynamicsKind& kind) {
  static std::mutex mu;
  static std::map<std::pair<int, double>, LqrData> cache;
  std::lock_guard<std::mutex> lock(mu);
  const auto key = std::make_pair(static_cast<int>(kind.model), kind.gravity);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, make_lqr(kind)).first;
  return it->second;
}

Eigen::VectorXd reference_control(const DynamicsKind& kind, const Eigen::VectorXd& state,
                                  const Eigen::VectorXd& goal) {
  const Eigen::VectorXd u = -lqr_data(kind).K * goal_error(kind, state, goal);
  return clamp_control(kind, u);
}

// ---- spawning ------------------------------------------------------------

namespace {

bool placement_ok(const Eigen::VectorXd& p, const std::vector<Eigen::VectorXd>& accepted,
                  const ScenarioConfig& cfg) {
  for (const Box& b : cfg.obstacles)
    if (b.surface_distance(p) < 2.0 * cfg.safe_distance) return false;
  for (const auto& q : accepted)
    if ((p - q).norm() < 3.0 * cfg.safe_distance) return false;
  return true;
}

std::vector<Eigen::VectorXd> sample_points(const ScenarioConfig& cfg, Rng& rng, long& attempts) {
  const int pd = cfg.dynamics.pos_dim();
  const double margin = cfg.safe_distance;
  for (Eigen::Index d = 0; d < pd; ++d)
    if (cfg.arena.high(d) - cfg.arena.low(d) <= 2.0 * margin)
      throw PlacementError("arena too small for spawn margin");
  std::vector<Eigen::VectorXd> pts;
  pts.reserve(static_cast<size_t>(cfg.n_agents));
  while (static_cast<int>(pts.size()) < cfg.n_agents) {
    if (++attempts > 100000) throw PlacementError("spawn rejection limit exceeded");
    Eigen::VectorXd p(pd);
    for (int d = 0; d < pd; ++d)
      p(d) = rng.uniform(cfg.arena.low(d) + margin, cfg.arena.high(d) - margin);
    if (placement_ok(p, pts, cfg)) pts.push_back(std::move(p));
  }
  return pts;
}

SpawnResult spawn_headon(const ScenarioConfig& cfg, Rng& rng) {
  const int pd = cfg.dynamics.pos_dim();
  const int n = cfg.n_agents;
  const double margin = 4.0 * cfg.safe_distance;
  SpawnResult out;
  out.states = JointState::Zero(cfg.dynamics.state_dim(), n);
  out.goals = Eigen::MatrixXd::Zero(pd, n);
  // Opposite pairs along x, one lane per pair; small lateral jitter breaks
  // exact mirror symmetry.
  const int pairs = n / 2;
  for (int k = 0; k < pairs; ++k) {
    const double t = pairs == 1 ? 0.5 : (0.5 + k) / static_cast<double>(pairs);
    Eigen::VectorXd left = Eigen::VectorXd::Zero(pd);
    Eigen::VectorXd right = Eigen::VectorXd::Zero(pd);
    left(0) = cfg.arena.low(0) + margin;
    right(0) = cfg.arena.high(0) - margin;
    for (int d = 1; d < pd; ++d) {
      const double lane = cfg.arena.low(d) + t * (cfg.arena.high(d) - cfg.arena.low(d));
      left(d) = lane + rng.uniform(-0.5, 0.5) * cfg.safe_distance;
      right(d) = lane + rng.uniform(-0.5, 0.5) * cfg.safe_distance;
    }
    out.states.col(2 * k).head(pd) = left;
    out.states.col(2 * k + 1).head(pd) = right;
    out.goals.col(2 * k) = right;
    out.goals.col(2 * k + 1) = left;
  }
  return out;
}

}  // namespace

SpawnResult spawn(const ScenarioConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x5eedc0de));
  if (cfg.spawn_mode == SpawnMode::HeadOn) return spawn_headon(cfg, rng);
  long attempts = 0;
  const auto starts = sample_points(cfg, rng, attempts);
  const auto goals = sample_points(cfg, rng, attempts);
  SpawnResult out;
  out.states = JointState::Zero(cfg.dynamics.state_dim(), cfg.n_agents);
  out.goals = Eigen::MatrixXd::Zero(cfg.dynamics.pos_dim(), cfg.n_agents);
  for (int i = 0; i < cfg.n_agents; ++i) {
    out.states.col(i).head(cfg.dynamics.pos_dim()) = starts[static_cast<size_t>(i)];
    out.goals.col(i) = goals[static_cast<size_t>(i)];
  }
  return out;
}

}  // namespace scbf
