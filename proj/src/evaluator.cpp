#include "scbf/evaluator.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <thread>

namespace scbf {

double safety_rate(const Rollout& rollout) {
  const int N = rollout.agent_count();
  const int S = rollout.recorded_states();
  if (N == 0 || S == 0) return 0.0;
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    long safe = 0;
    for (int t = 0; t < S; ++t) safe += rollout.safe(i, t);
    acc += static_cast<double>(safe) / static_cast<double>(S);
  }
  return acc / static_cast<double>(N);
}

double reward(const Rollout& rollout, bool per_step_danger) {
  const int N = rollout.agent_count();
  const int S = rollout.recorded_states();
  if (N == 0 || S == 0) return 0.0;
  const int pd = rollout.config.dynamics.pos_dim();
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    double r = 0.0;
    bool reached = false;
    for (int t = 0; t < S; ++t) {
      if (!reached &&
          (rollout.states[static_cast<size_t>(t)].col(i).head(pd) - rollout.goals.col(i))
                  .norm() <= rollout.config.goal_threshold) {
        reached = true;
        r += 10.0;
      }
      if (per_step_danger) {
        if (!rollout.safe(i, t)) r -= 1.0;
      } else if (t > 0 && rollout.safe(i, t - 1) && !rollout.safe(i, t)) {
        r -= 1.0;
      }
    }
    acc += r;
  }
  return acc / static_cast<double>(N);
}

double goal_fraction(const Rollout& rollout) {
  const int N = rollout.agent_count();
  const int S = rollout.recorded_states();
  if (N == 0 || S == 0) return 0.0;
  const int pd = rollout.config.dynamics.pos_dim();
  int reached = 0;
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < S; ++t)
      if ((rollout.states[static_cast<size_t>(t)].col(i).head(pd) - rollout.goals.col(i))
              .norm() <= rollout.config.goal_threshold) {
        ++reached;
        break;
      }
  return static_cast<double>(reached) / static_cast<double>(N);
}

double opr_fraction(const Rollout& rollout) {
  if (rollout.refined.size() == 0) return 0.0;
  return static_cast<double>(rollout.refined.cast<long>().sum()) /
         static_cast<double>(rollout.refined.size());
}

double eps_hat(const CertificatePair& pair, const std::vector<Rollout>& rollouts) {
  long violations = 0, total = 0;
  for (const Rollout& r : rollouts)
    for (int i = 0; i < r.agent_count(); ++i) {
      ++total;
      if (y_value(pair, r, i) <= 0.0) ++violations;
    }
  return total > 0 ? static_cast<double>(violations) / static_cast<double>(total) : 0.0;
}

std::vector<double> eps_hat_per_agent(const CertificatePair& pair,
                                      const std::vector<Rollout>& rollouts) {
  if (rollouts.empty()) return {};
  const int N = rollouts.front().agent_count();
  std::vector<double> out(static_cast<size_t>(N), 0.0);
  for (const Rollout& r : rollouts)
    for (int i = 0; i < std::min(N, r.agent_count()); ++i)
      if (y_value(pair, r, i) <= 0.0) out[static_cast<size_t>(i)] += 1.0;
  for (double& v : out) v /= static_cast<double>(rollouts.size());
  return out;
}

double global_cbf(const CertificatePair& pair, const JointState& states,
                  const ScenarioConfig& cfg, const Eigen::MatrixXd& goals) {
  const NeighborIndex index(states, cfg.dynamics.pos_dim(), cfg.obs_radius);
  double hg = std::numeric_limits<double>::infinity();
  for (int i = 0; i < states.cols(); ++i) {
    const double h = cbf_value(pair, own_features(cfg.dynamics, states.col(i), goals.col(i)),
                               observe(states, i, cfg, index));
    hg = std::min(hg, h);
  }
  return hg;
}

// ---- landscape -------------------------------------------------------------

double landscape_point(const CertificatePair& pair, double rel_distance, double closing_speed,
                       int perspective) {
  const DynamicsKind& kind = pair.kind;
  const int n = kind.state_dim();
  const int pd = kind.pos_dim();
  const double sgn = closing_speed >= 0.0 ? 1.0 : -1.0;

  // Both perspectives canonicalize to: neighbor ahead on +x at rel_distance,
  // own velocity c/2 toward it for closing c, goal 2.5 m along the motion
  // direction. Perspective 1 builds agent 2's view and rotates by pi, which
  // lands on exactly the same numbers.
  (void)perspective;
  Eigen::VectorXd own_state = Eigen::VectorXd::Zero(n);
  own_state(pd) = 0.5 * closing_speed;  // vx
  Eigen::VectorXd goal = Eigen::VectorXd::Zero(pd);
  goal(0) = sgn * 2.5;

  Observation obs;
  obs.columns = Eigen::MatrixXd::Zero(n, 1);
  obs.columns(0, 0) = rel_distance;
  obs.columns(pd, 0) = -closing_speed;
  obs.kinds = {EntityKind::Agent};
  return cbf_value(pair, own_features(kind, own_state, goal), obs);
}

Eigen::MatrixXd landscape(const CertificatePair& pair, const LandscapeSpec& spec) {
  if (spec.n_r < 1 || spec.n_c < 1) throw ConfigError("landscape grid must be at least 1x1");
  Eigen::MatrixXd grid(spec.n_r, spec.n_c);
  for (int i = 0; i < spec.n_r; ++i) {
    const double r = spec.n_r == 1 ? spec.r_min
                                   : spec.r_min + (spec.r_max - spec.r_min) * i / (spec.n_r - 1.0);
    for (int j = 0; j < spec.n_c; ++j) {
      const double c = spec.n_c == 1 ? spec.c_min
                                     : spec.c_min + (spec.c_max - spec.c_min) * j / (spec.n_c - 1.0);
      grid(i, j) = landscape_point(pair, r, c);
    }
  }
  return grid;
}

void write_landscape_csv(const std::string& path, const LandscapeSpec& spec,
                         const Eigen::MatrixXd& grid) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open landscape file: " + path);
  out << std::setprecision(17);
  out << "rel_distance,closing_speed,h\n";
  for (int i = 0; i < spec.n_r; ++i) {
    const double r = spec.n_r == 1 ? spec.r_min
                                   : spec.r_min + (spec.r_max - spec.r_min) * i / (spec.n_r - 1.0);
    for (int j = 0; j < spec.n_c; ++j) {
      const double c = spec.n_c == 1 ? spec.c_min
                                     : spec.c_min + (spec.c_max - spec.c_min) * j / (spec.n_c - 1.0);
      out << r << ',' << c << ',' << grid(i, j) << '\n';
    }
  }
}

// ---- evaluation ------------------------------------------------------------

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

EpisodeMetrics evaluate(const CertificatePair& pair, const ScenarioConfig& cfg, int episodes,
                        bool refine, std::uint64_t seed, int jobs,
                        std::vector<Rollout>* keep_rollouts) {
  if (episodes < 1) throw ConfigError("episodes must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Rollout> rollouts(static_cast<size_t>(episodes));

  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int e = next.fetch_add(1);
      if (e >= episodes) return;
      EpisodeOptions opts;
      opts.seed = mix_seed(seed, static_cast<std::uint64_t>(e));
      opts.refine = refine;
      rollouts[static_cast<size_t>(e)] = run_episode(pair, cfg, opts);
    }
  };
  const int workers = std::max(1, std::min(jobs, episodes));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  EpisodeMetrics m;
  m.episodes = episodes;
  for (const Rollout& r : rollouts) {
    m.ep_safety.push_back(safety_rate(r));
    m.ep_reward.push_back(reward(r));
    m.ep_goal.push_back(goal_fraction(r));
    m.ep_opr.push_back(opr_fraction(r));
    m.steps += r.action_steps();
  }
  m.safety_rate = mean_of(m.ep_safety);
  m.safety_rate_std = std_of(m.ep_safety);
  m.mean_reward = mean_of(m.ep_reward);
  m.reward_std = std_of(m.ep_reward);
  m.goal_reached_fraction = mean_of(m.ep_goal);
  m.goal_fraction_std = std_of(m.ep_goal);
  m.opr_proportion = mean_of(m.ep_opr);
  m.opr_std = std_of(m.ep_opr);
  m.eps_hat = eps_hat(pair, rollouts);
  m.eps_hat_per_agent = eps_hat_per_agent(pair, rollouts);
  m.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (keep_rollouts) *keep_rollouts = std::move(rollouts);
  return m;
}

void write_metrics_json(const std::string& path, const EpisodeMetrics& m,
                        const ScenarioConfig& cfg, bool refine, std::uint64_t seed,
                        const std::string& checkpoint_hash) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["scenario"] = nlohmann::json::parse(cfg.to_json_string());
  j["episodes"] = m.episodes;
  j["refine"] = refine;
  j["seed"] = seed;
  j["checkpoint_hash"] = checkpoint_hash;
  j["safety_rate"] = {{"mean", m.safety_rate}, {"std", m.safety_rate_std},
                      {"per_episode", m.ep_safety}};
  j["mean_reward"] = {{"mean", m.mean_reward}, {"std", m.reward_std},
                      {"per_episode", m.ep_reward}};
  j["goal_reached_fraction"] = {{"mean", m.goal_reached_fraction}, {"std", m.goal_fraction_std},
                                {"per_episode", m.ep_goal}};
  j["opr_proportion"] = {{"mean", m.opr_proportion}, {"std", m.opr_std},
                         {"per_episode", m.ep_opr}};
  j["eps_hat"] = {{"pooled", m.eps_hat}, {"per_agent", m.eps_hat_per_agent}};
  j["steps"] = m.steps;
  j["wall_time"] = m.wall_time;
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open metrics file: " + path);
  out << j.dump(2) << "\n";
}

void write_trajectories_csv(const std::string& path, const std::vector<Rollout>& rollouts) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open trajectory file: " + path);
  out << std::setprecision(17);
  if (rollouts.empty()) return;
  const int n = rollouts.front().config.dynamics.state_dim();
  const int mdim = rollouts.front().config.dynamics.control_dim();
  out << "episode,step,agent";
  for (int k = 0; k < n; ++k) out << ",s" << k;
  for (int k = 0; k < mdim; ++k) out << ",a" << k;
  out << ",h,safe,refined\n";
  for (size_t e = 0; e < rollouts.size(); ++e) {
    const Rollout& r = rollouts[e];
    for (int t = 0; t < r.action_steps(); ++t)
      for (int i = 0; i < r.agent_count(); ++i) {
        out << e << ',' << t << ',' << i;
        for (int k = 0; k < n; ++k) out << ',' << r.states[static_cast<size_t>(t)](k, i);
        for (int k = 0; k < mdim; ++k) out << ',' << r.actions[static_cast<size_t>(t)](k, i);
        out << ',' << r.h_values(i, t) << ',' << static_cast<int>(r.safe(i, t)) << ','
            << static_cast<int>(r.refined(i, t)) << '\n';
      }
  }
}

}  // namespace scbf
