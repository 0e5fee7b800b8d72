#include "scbf/rollout.hpp"

#include <cmath>
#include <limits>

#include "scbf/rng.hpp"

namespace scbf {

namespace {

// Conflict-mode hysteresis for the goal-imitation mask. An agent enters
// conflict when an entity closes fast enough to reach the safe distance
// within the horizon (or is already close), and only leaves once every
// entity is comfortably far or receding. Without the hysteresis a successful
// avoidance maneuver kills the closing speed, clears the flag, and the
// imitation term immediately steers back into the conflict it just resolved.
bool conflict_enter(const Observation& obs, double safe_distance, int pos_dim) {
  constexpr double kTtcHorizon = 0.8;  // seconds
  for (int c = 0; c < obs.count(); ++c) {
    const Eigen::VectorXd rel_p = obs.columns.col(c).head(pos_dim);
    const Eigen::VectorXd rel_v = obs.columns.col(c).segment(pos_dim, pos_dim);
    const double dist = rel_p.norm();
    const double range_rate = dist > 1e-12 ? rel_p.dot(rel_v) / dist : 0.0;
    if (dist < 3.0 * safe_distance && range_rate < 0.3) return true;
    if (range_rate < -1e-9 && (dist - safe_distance) / (-range_rate) < kTtcHorizon)
      return true;
  }
  return false;
}

bool conflict_exit(const Observation& obs, double safe_distance, int pos_dim) {
  for (int c = 0; c < obs.count(); ++c) {
    const Eigen::VectorXd rel_p = obs.columns.col(c).head(pos_dim);
    const Eigen::VectorXd rel_v = obs.columns.col(c).segment(pos_dim, pos_dim);
    const double dist = rel_p.norm();
    const double range_rate = dist > 1e-12 ? rel_p.dot(rel_v) / dist : 0.0;
    if (dist < 6.0 * safe_distance && range_rate < 0.1) return false;
  }
  return true;
}

Eigen::VectorXd random_control(const DynamicsKind& kind, Rng& rng) {
  Eigen::VectorXd u(kind.control_dim());
  for (int c = 0; c < kind.control_dim(); ++c)
    u(c) = rng.uniform(kind.control_low(c), kind.control_high(c));
  return u;
}

// Predicted absolute entity states at t+dt for the refiner: each agent
// column replays its displacement over the previous step (velocities and
// tilt frozen); obstacle proxies stay put.
Eigen::MatrixXd predict_next_entities(const Observation& obs, const JointState& states,
                                      const Eigen::MatrixXd& prev_positions, int observer,
                                      const std::vector<int>& near, int pos_dim) {
  Eigen::MatrixXd next = obs.columns.colwise() + states.col(observer);
  for (Eigen::Index c = 0, a = 0; c < next.cols(); ++c) {
    if (obs.kinds[static_cast<size_t>(c)] != EntityKind::Agent) continue;
    const int j = near[static_cast<size_t>(a++)];
    next.col(c).head(pos_dim) += states.col(j).head(pos_dim) - prev_positions.col(j);
  }
  return next;
}

}  // namespace

Rollout run_episode(const CertificatePair& pair, const ScenarioConfig& cfg,
                    const EpisodeOptions& opts) {
  cfg.validate();
  const DynamicsKind& kind = cfg.dynamics;
  const int N = cfg.n_agents;
  const int T = cfg.episode_steps;
  const int pd = kind.pos_dim();

  Rollout out;
  out.config = cfg;
  const SpawnResult start = spawn(cfg, opts.seed);
  out.goals = start.goals;
  out.h_values.setZero(N, T + 1);
  out.min_dists.setZero(N, T + 1);
  out.safe.setZero(N, T + 1);
  out.refined.setZero(N, T);
  out.states.reserve(static_cast<size_t>(T) + 1);
  out.actions.reserve(static_cast<size_t>(T));

  Rng explore_rng(mix_seed(opts.seed, 0xac7104));
  JointState current = start.states;
  // Seeded so the first step's displacement equals velocity * dt.
  Eigen::MatrixXd prev_positions =
      current.topRows(pd) - kind.dt * current.middleRows(pd, pd);

  std::vector<bool> in_conflict(static_cast<size_t>(N), false);
  std::vector<CbfSample> pending;
  for (int t = 0; t < T; ++t) {
    const NeighborIndex index(current, pd, cfg.obs_radius);
    out.states.push_back(current);

    Eigen::MatrixXd actions(kind.control_dim(), N);
    pending.clear();
    std::vector<std::vector<int>> nears(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
      nears[static_cast<size_t>(i)] = index.query(i);
      const Observation obs = observe(current, i, cfg, index);
      const Eigen::VectorXd own = own_features(kind, current.col(i), out.goals.col(i));
      const double md = min_distance(current, i, cfg, index);
      out.min_dists(i, t) = md;
      out.safe(i, t) = md >= cfg.safe_distance;
      out.h_values(i, t) = cbf_value(pair, own, obs);

      Eigen::VectorXd u;
      const bool explore = opts.iota > 0.0 && explore_rng.uniform() < opts.iota;
      if (explore)
        u = random_control(kind, explore_rng);
      else
        u = policy_action(pair, own, obs);

      if (opts.refine && opts.refine_cfg.enabled) {
        RefineContext ctx;
        ctx.state = current.col(i);
        ctx.goal = out.goals.col(i);
        ctx.obs = obs;
        ctx.next_entities =
            predict_next_entities(obs, current, prev_positions, i, nears[static_cast<size_t>(i)], pd);
        const RefineResult r = refine(pair, ctx, u, opts.refine_cfg);
        out.refined(i, t) = r.triggered && !r.fell_back;
        u = r.control;
      }
      actions.col(i) = u;

      if (in_conflict[static_cast<size_t>(i)]) {
        if (conflict_exit(obs, cfg.safe_distance, pd)) in_conflict[static_cast<size_t>(i)] = false;
      } else if (conflict_enter(obs, cfg.safe_distance, pd)) {
        in_conflict[static_cast<size_t>(i)] = true;
      }

      if (opts.collect) {
        CbfSample smp;
        smp.state = current.col(i);
        smp.goal = out.goals.col(i);
        smp.obs = obs;
        smp.min_dist = md;
        smp.label = md < cfg.safe_distance ? RegionLabel::Dangerous
                    : t == 0               ? RegionLabel::Initial
                                           : RegionLabel::Other;
        smp.conflict_free = !in_conflict[static_cast<size_t>(i)];
        smp.u_ref = reference_control(kind, current.col(i), out.goals.col(i));
        pending.push_back(std::move(smp));
      }
    }

    JointState next(kind.state_dim(), N);
    bool failed = false;
    for (int i = 0; i < N; ++i) {
      try {
        next.col(i) = step(kind, current.col(i), actions.col(i), kind.dt);
      } catch (const NumericError&) {
        failed = true;
        break;
      }
    }
    if (failed) {
      out.truncated = true;
      break;
    }
    out.actions.push_back(std::move(actions));

    if (opts.collect) {
      for (int i = 0; i < N; ++i) {
        CbfSample& smp = pending[static_cast<size_t>(i)];
        smp.next_state = next.col(i);
        smp.next_entities.resize(kind.state_dim(), smp.obs.count());
        Eigen::Index c = 0;
        for (int j : nears[static_cast<size_t>(i)])
          smp.next_entities.col(c++) = next.col(j);
        for (Eigen::Index k = c; k < smp.obs.count(); ++k)  // obstacles stay put
          smp.next_entities.col(k) = smp.obs.columns.col(k) + current.col(i);
        opts.collect->push_back(std::move(smp));
      }
    }

    prev_positions = current.topRows(pd);
    current = next;
  }

  if (!out.truncated) {
    const NeighborIndex index(current, pd, cfg.obs_radius);
    out.states.push_back(current);
    const int t = T;
    for (int i = 0; i < N; ++i) {
      const double md = min_distance(current, i, cfg, index);
      out.min_dists(i, t) = md;
      out.safe(i, t) = md >= cfg.safe_distance;
      out.h_values(i, t) =
          cbf_value(pair, own_features(kind, current.col(i), out.goals.col(i)),
                    observe(current, i, cfg, index));
    }
  } else {
    const int kept = out.recorded_states();
    out.h_values.conservativeResize(N, kept);
    out.min_dists.conservativeResize(N, kept);
    out.safe.conservativeResize(N, kept);
    out.refined.conservativeResize(N, std::max(0, kept - 1));
  }
  return out;
}

double y_value(const CertificatePair& pair, const Rollout& rollout, int agent) {
  const int S = rollout.recorded_states();
  if (S == 0) throw NumericError("y_value on an empty rollout");
  const ScenarioConfig& cfg = rollout.config;
  const int pd = cfg.dynamics.pos_dim();

  constexpr double inf = std::numeric_limits<double>::infinity();
  double m_init = inf, m_dang = inf, m_deriv = inf;

  for (int t = 0; t < S; ++t) {
    const JointState& now = rollout.states[static_cast<size_t>(t)];
    const NeighborIndex index(now, pd, cfg.obs_radius);
    const Observation obs = observe(now, agent, cfg, index);
    const Eigen::VectorXd own =
        own_features(cfg.dynamics, now.col(agent), rollout.goals.col(agent));
    const double h = cbf_value(pair, own, obs);
    const bool is_safe = min_distance(now, agent, cfg, index) >= cfg.safe_distance;

    if (t == 0) m_init = std::min(m_init, h);
    if (!is_safe) m_dang = std::min(m_dang, -h);
    if (t + 1 < S && h >= 0.0) {
      // Numeric hdot with the entity set frozen at time t, the same
      // convention as the recorded (t, t+dt) training pairs.
      const JointState& next = rollout.states[static_cast<size_t>(t) + 1];
      CbfSample pairwise;
      pairwise.state = now.col(agent);
      pairwise.goal = rollout.goals.col(agent);
      pairwise.obs = obs;
      pairwise.next_state = next.col(agent);
      pairwise.next_entities.resize(cfg.dynamics.state_dim(), obs.count());
      Eigen::Index c = 0;
      for (int j : index.query(agent)) pairwise.next_entities.col(c++) = next.col(j);
      for (Eigen::Index k = c; k < obs.count(); ++k)
        pairwise.next_entities.col(k) = obs.columns.col(k) + now.col(agent);
      const double hdot = h_dot_numeric(pair, pairwise);
      m_deriv = std::min(m_deriv, hdot + pair.lambda * h);
    }
  }
  const double y = std::min(m_init, std::min(m_dang, m_deriv));
  if (y == inf) throw NumericError("y_value undefined: no samples in any category");
  return y;
}

}  // namespace scbf
