#include "scbf/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>

namespace scbf {

void TrainConfig::validate() const {
  if (!(iota >= 0.0 && iota <= 1.0)) throw ConfigError("iota must be in [0, 1]");
  if (!(dangerous_fraction >= 0.0 && dangerous_fraction <= 1.0))
    throw ConfigError("dangerous_fraction must be in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (static_cast<std::size_t>(batch_size) > buffer_capacity)
    throw ConfigError("batch_size exceeds buffer capacity");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (outer_iterations < 1) throw ConfigError("outer_iterations must be >= 1");
  if (steps_per_collection < 1) throw ConfigError("steps_per_collection must be >= 1");
  if (episodes_per_collection < 1) throw ConfigError("episodes_per_collection must be >= 1");
  if (probe_episodes < 0) throw ConfigError("probe_episodes must be >= 0");
  if (convergence_window < 1) throw ConfigError("convergence_window must be >= 1");
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open train config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("unreadable train config " + path + ": " + e.what());
  }
  TrainConfig tc;
  try {
    if (j.contains("iota")) tc.iota = j["iota"].get<double>();
    if (j.contains("batch_size")) tc.batch_size = j["batch_size"].get<int>();
    if (j.contains("lr")) tc.lr = j["lr"].get<double>();
    if (j.contains("weight_decay")) tc.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("outer_iterations")) tc.outer_iterations = j["outer_iterations"].get<int>();
    if (j.contains("steps_per_collection"))
      tc.steps_per_collection = j["steps_per_collection"].get<int>();
    if (j.contains("convergence_tol")) tc.convergence_tol = j["convergence_tol"].get<double>();
    if (j.contains("convergence_window"))
      tc.convergence_window = j["convergence_window"].get<int>();
    if (j.contains("seed")) tc.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("episodes_per_collection"))
      tc.episodes_per_collection = j["episodes_per_collection"].get<int>();
    if (j.contains("probe_episodes")) tc.probe_episodes = j["probe_episodes"].get<int>();
    if (j.contains("strict_x0")) tc.strict_x0 = j["strict_x0"].get<bool>();
    if (j.contains("dangerous_fraction"))
      tc.dangerous_fraction = j["dangerous_fraction"].get<double>();
    if (j.contains("pretrain_steps")) tc.pretrain_steps = j["pretrain_steps"].get<int>();
    if (j.contains("rehearsal_steps")) tc.rehearsal_steps = j["rehearsal_steps"].get<int>();
    if (j.contains("buffer_capacity"))
      tc.buffer_capacity = j["buffer_capacity"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid train config " + path + ": " + e.what());
  }
  tc.validate();
  return tc;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw ConfigError("buffer capacity must be positive");
  samples_.reserve(std::min<std::size_t>(capacity_, 1 << 14));
}

void ReplayBuffer::add(CbfSample sample) {
  ++inserted_;
  if (samples_.size() < capacity_) {
    samples_.push_back(std::move(sample));
    return;
  }
  samples_[next_] = std::move(sample);
  next_ = (next_ + 1) % capacity_;
}

void ReplayBuffer::clear() {
  samples_.clear();
  next_ = 0;
}

namespace {

// Partial Fisher-Yates draw of `take` entries from idx.
void shuffle_prefix(std::vector<std::size_t>& idx, std::size_t take, Rng& rng) {
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.next_u64() % (idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
}

}  // namespace

std::vector<const CbfSample*> ReplayBuffer::sample(int k, Rng& rng) const {
  if (samples_.empty()) throw ConfigError("sampling from an empty buffer");
  std::vector<std::size_t> idx(samples_.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), idx.size());
  shuffle_prefix(idx, take, rng);
  std::vector<const CbfSample*> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = &samples_[idx[i]];
  return out;
}

std::vector<const CbfSample*> ReplayBuffer::sample_balanced(int k, double dangerous_fraction,
                                                            Rng& rng) const {
  if (samples_.empty()) throw ConfigError("sampling from an empty buffer");
  if (dangerous_fraction <= 0.0) return sample(k, rng);
  // Three tiers: dangerous-region samples, conflict-band samples (imminent
  // collision but still safe), everything else. The first two are where the
  // dangerous and derivative hinges actually fire.
  std::vector<std::size_t> dang, conflict, rest;
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (samples_[i].label == RegionLabel::Dangerous)
      dang.push_back(i);
    else if (!samples_[i].conflict_free)
      conflict.push_back(i);
    else
      rest.push_back(i);
  }
  const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(k), samples_.size());
  const auto share =
      static_cast<std::size_t>(0.5 * dangerous_fraction * static_cast<double>(want));
  std::size_t take_dang = std::min(dang.size(), share);
  std::size_t take_conf = std::min(conflict.size(), share);
  std::size_t take_rest = std::min(rest.size(), want - take_dang - take_conf);
  take_conf = std::min(conflict.size(), want - take_dang - take_rest);  // backfill
  take_dang = std::min(dang.size(), want - take_conf - take_rest);
  shuffle_prefix(dang, take_dang, rng);
  shuffle_prefix(conflict, take_conf, rng);
  shuffle_prefix(rest, take_rest, rng);
  std::vector<const CbfSample*> out;
  out.reserve(take_dang + take_conf + take_rest);
  for (std::size_t i = 0; i < take_dang; ++i) out.push_back(&samples_[dang[i]]);
  for (std::size_t i = 0; i < take_conf; ++i) out.push_back(&samples_[conflict[i]]);
  for (std::size_t i = 0; i < take_rest; ++i) out.push_back(&samples_[rest[i]]);
  return out;
}

void collect(const CertificatePair& pair, const ScenarioConfig& cfg, const TrainConfig& tc,
             std::uint64_t round_seed, ReplayBuffer& buffer) {
  for (int e = 0; e < tc.episodes_per_collection; ++e) {
    std::vector<CbfSample> samples;
    EpisodeOptions opts;
    opts.seed = mix_seed(round_seed, static_cast<std::uint64_t>(e));
    opts.iota = tc.iota;
    opts.collect = &samples;
    run_episode(pair, cfg, opts);
    for (auto& s : samples) buffer.add(std::move(s));
  }
}

StepStats train_iteration(CertificatePair& pair, const ReplayBuffer& buffer,
                          const TrainConfig& tc, Rng& rng) {
  for (const ParamBlock* b : pair.blocks())
    if (!b->value.allFinite() || b->value.cwiseAbs().maxCoeff() > 1e9)
      throw TrainingDiverged("parameters diverged");
  const auto batch = buffer.sample_balanced(tc.batch_size, tc.dangerous_fraction, rng);
  const LossBreakdown loss = total_loss_backward(pair, batch, tc.strict_x0);
  StepStats stats;
  stats.total = loss.total;
  stats.lc_init = loss.lc_init;
  stats.lc_dang = loss.lc_dang;
  stats.lc_deriv = loss.lc_deriv;
  stats.lg = loss.lg;
  stats.applied = sgd_step(pair.blocks(), tc.lr, tc.weight_decay);
  if (!stats.applied) std::cerr << "train: skipped update with non-finite gradient\n";
  return stats;
}

namespace {

// Synthetic local configuration for the certificate warm start: entities
// spread over the observation ball with random relative velocities. The
// fitted target is the stopping-distance barrier, clip(min over entities of
// r - kappa_s - closing^2 / (2 a_rel)), which seeds both the distance dip
// and the closing-speed slope that the refiner differentiates.
CbfSample synthetic_local_sample(const ScenarioConfig& cfg, Rng& rng, double* target) {
  const DynamicsKind& kind = cfg.dynamics;
  const int n = kind.state_dim();
  const int pd = kind.pos_dim();
  const double a_rel = 2.0 * kind.control_high.cwiseAbs().minCoeff();
  CbfSample s;
  s.state = Eigen::VectorXd::Zero(n);
  for (int d = 0; d < pd; ++d) s.state(pd + d) = rng.uniform(-1.5, 1.5);
  if (kind.model == DynamicsModel::Drone3D)
    for (int d = 2 * pd; d < n; ++d) s.state(d) = rng.uniform(-0.3, 0.3);
  s.goal = Eigen::VectorXd::Zero(pd);
  for (int d = 0; d < pd; ++d) s.goal(d) = rng.uniform(-3.0, 3.0);
  // Mostly single-entity samples: the pooled min-composition comes from the
  // architecture, the regression only has to shape the per-column response.
  const double ku = rng.uniform();
  const int k = ku < 0.15 ? 0 : ku < 0.8 ? 1 : 2 + static_cast<int>(rng.next_u64() % 2);
  s.obs.columns.resize(n, k);
  double margin = cfg.obs_radius - cfg.safe_distance;
  for (int c = 0; c < k; ++c) {
    Eigen::VectorXd dir(pd);
    double norm = 0.0;
    while (norm < 1e-6) {
      for (int d = 0; d < pd; ++d) dir(d) = rng.normal();
      norm = dir.norm();
    }
    dir /= norm;
    // Concentrate in the critical band near kappa_s.
    const double r = rng.uniform() < 0.6
                         ? cfg.safe_distance * rng.uniform(0.25, 3.0)
                         : rng.uniform(0.25 * cfg.safe_distance, cfg.obs_radius);
    Eigen::VectorXd col = Eigen::VectorXd::Zero(n);
    col.head(pd) = r * dir;
    for (int d = 0; d < pd; ++d) col(pd + d) = rng.uniform(-3.0, 3.0);
    if (kind.model == DynamicsModel::Drone3D)
      for (int d = 2 * pd; d < n; ++d) col(d) = rng.uniform(-0.5, 0.5);
    s.obs.columns.col(c) = col;
    s.obs.kinds.push_back(EntityKind::Agent);
    const double closing = std::max(0.0, -col.head(pd).dot(col.segment(pd, pd)) / r);
    margin = std::min(margin,
                      r - cfg.safe_distance - closing * closing / (2.0 * a_rel));
  }
  s.min_dist = cfg.obs_radius;
  for (int c = 0; c < k; ++c)
    s.min_dist = std::min(s.min_dist, s.obs.columns.col(c).head(pd).norm());
  s.label = s.min_dist < cfg.safe_distance ? RegionLabel::Dangerous : RegionLabel::Other;
  s.next_state = s.state;
  s.next_entities.resize(n, k);
  for (int c = 0; c < k; ++c) s.next_entities.col(c) = s.obs.columns.col(c);
  s.u_ref = reference_control(kind, s.state, s.goal);
  *target = std::min(0.6, std::max(-0.3, margin));
  return s;
}

// Avoidance prior for the policy warm start: the reference control plus a
// bounded repulsion from close or closing entities, with a deterministic
// tangential component so symmetric encounters break the same way.
Eigen::VectorXd avoidance_prior(const ScenarioConfig& cfg, const CbfSample& s) {
  const DynamicsKind& kind = cfg.dynamics;
  const int pd = kind.pos_dim();
  const double a_max = kind.control_high.cwiseAbs().minCoeff();
  Eigen::VectorXd push = Eigen::VectorXd::Zero(pd);
  for (int c = 0; c < s.obs.count(); ++c) {
    const Eigen::VectorXd rel_p = s.obs.columns.col(c).head(pd);
    const Eigen::VectorXd rel_v = s.obs.columns.col(c).segment(pd, pd);
    const double r = std::max(rel_p.norm(), 1e-6);
    const Eigen::VectorXd dir = rel_p / r;
    const double closing = std::max(0.0, -dir.dot(rel_v));
    double w = std::max(0.0, 1.0 - (r - cfg.safe_distance) / (4.0 * cfg.safe_distance));
    w *= 0.4 + closing;
    if (w <= 0.0) continue;
    Eigen::VectorXd tangent(pd);
    if (pd == 2)
      tangent << -dir(1), dir(0);
    else {
      tangent << -dir(1), dir(0), 0.0;
      if (tangent.norm() < 1e-6) tangent << 1.0, 0.0, 0.0;
      tangent.normalize();
    }
    const double side = dir(0) * rel_v(1) - dir(1) * rel_v(0) >= 0.0 ? 1.0 : -1.0;
    push += w * (-dir + 0.6 * side * tangent);
  }
  const double pn = push.norm();
  if (pn > 1.5) push *= 1.5 / pn;
  Eigen::VectorXd target = s.u_ref;
  if (kind.model == DynamicsModel::DoubleIntegrator2D) {
    target += a_max * push;
  } else {
    // Lateral push maps onto tilt-rate channels, vertical onto thrust.
    target(0) += push(0);
    target(1) += push(1);
    target(2) += a_max * push(2);
  }
  // Keep targets strictly inside the box so the tanh head can match them.
  return (0.95 * clamp_control(kind, target).array()).matrix();
}

// One synthetic-prior regression step on both networks.
void prior_regression_step(CertificatePair& pair, const ScenarioConfig& cfg,
                           const TrainConfig& tc, double lr, Rng& rng, int* skipped) {
  std::vector<CbfSample> samples(static_cast<size_t>(tc.batch_size));
  std::vector<double> targets(samples.size());
  Eigen::MatrixXd u_targets(cfg.dynamics.control_dim(), tc.batch_size);
  std::vector<const CbfSample*> batch(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    samples[i] = synthetic_local_sample(cfg, rng, &targets[i]);
    batch[i] = &samples[i];
    u_targets.col(static_cast<Eigen::Index>(i)) = avoidance_prior(cfg, samples[i]);
  }
  cbf_regression_backward(pair, batch, targets);
  if (!sgd_step(pair.cbf.blocks(), lr, tc.weight_decay)) ++*skipped;
  policy_regression_backward(pair, batch, u_targets);
  if (!sgd_step(pair.policy.blocks(), lr, tc.weight_decay)) ++*skipped;
}

struct ProbeMetrics {
  double safety_rate = 0.0;
  double eps_hat = 0.0;
};

ProbeMetrics run_probe(const CertificatePair& pair, const ScenarioConfig& cfg,
                       const TrainConfig& tc) {
  ProbeMetrics pm;
  if (tc.probe_episodes == 0) return pm;
  long safe_count = 0, state_count = 0, violations = 0, trajectories = 0;
  for (int e = 0; e < tc.probe_episodes; ++e) {
    EpisodeOptions opts;
    opts.seed = mix_seed(tc.seed, 0x9b0be5u + static_cast<std::uint64_t>(e));
    const Rollout r = run_episode(pair, cfg, opts);
    safe_count += r.safe.cast<long>().sum();
    state_count += static_cast<long>(r.safe.size());
    for (int i = 0; i < r.agent_count(); ++i) {
      ++trajectories;
      if (y_value(pair, r, i) <= 0.0) ++violations;
    }
  }
  pm.safety_rate = state_count > 0 ? static_cast<double>(safe_count) / state_count : 0.0;
  pm.eps_hat = trajectories > 0 ? static_cast<double>(violations) / trajectories : 0.0;
  return pm;
}

void write_history_row(std::ofstream& out, const RoundStats& r) {
  out << r.round << ',' << r.cumulative_steps << ',' << r.loss << ',' << r.lc_init << ','
      << r.lc_dang << ',' << r.lc_deriv << ',' << r.lg << ',' << r.probe_safety_rate << ','
      << r.eps_hat << '\n';
}

}  // namespace

TrainResult train(CertificatePair& pair, const ScenarioConfig& cfg, const TrainConfig& tc,
                  const std::string& out_dir) {
  cfg.validate();
  tc.validate();
  TrainResult result;
  ReplayBuffer buffer(tc.buffer_capacity);
  Rng batch_rng(mix_seed(tc.seed, 0xba7c4));

  std::ofstream history;
  if (!out_dir.empty()) {
    history.open(out_dir + "/history.csv");
    if (!history) throw ConfigError("cannot open history file in " + out_dir);
    history << std::setprecision(17);
    history << "round,step,L,Lc0,Lcd,Lch,Lg,probe_safety_rate,eps_hat\n";
  }

  long cumulative_steps = 0;
  std::vector<double> round_losses;
  for (int round = 1; round <= tc.outer_iterations; ++round) {
    buffer.clear();
    collect(pair, cfg, tc, mix_seed(tc.seed, 0xc011ec7u + static_cast<std::uint64_t>(round)),
            buffer);

    if (round == 1) {
      // Pre-update snapshot: loss of the first batch under the initial
      // parameters plus probe metrics of the untrained pair.
      Rng peek_rng(mix_seed(tc.seed, 0xba7c4));
      const auto first_batch = buffer.sample_balanced(tc.batch_size, tc.dangerous_fraction, peek_rng);
      const LossBreakdown l0 = total_loss(pair, first_batch, tc.strict_x0);
      const ProbeMetrics pm0 = run_probe(pair, cfg, tc);
      result.baseline = {0, 0, l0.total, l0.lc_init, l0.lc_dang, l0.lc_deriv, l0.lg,
                         pm0.safety_rate, pm0.eps_hat};
      if (history) write_history_row(history, result.baseline);

      // Warm start: regress h onto a short-horizon stopping barrier and the
      // policy onto the reference plus an avoidance prior, both over
      // synthetic local configurations. Joint training from a cold start
      // settles into a colliding policy with a flat certificate; starting
      // inside the avoiding basin lets the hinges refine instead of fight.
      // The mean-normalized regression tolerates a hotter rate than the
      // summed hinge loss; 5x converges in a fraction of the steps.
      Rng synth_rng(mix_seed(tc.seed, 0x5e7a9));
      for (int s = 0; s < tc.pretrain_steps; ++s)
        prior_regression_step(pair, cfg, tc, 5.0 * tc.lr, synth_rng, &result.skipped_updates);
    }

    // Rehearse the synthetic prior so the bulk imitation updates cannot
    // silently overwrite conflict-zone behavior between collections.
    Rng rehearse_rng(mix_seed(tc.seed, 0x4ea43e + static_cast<std::uint64_t>(round)));
    for (int s = 0; s < tc.rehearsal_steps; ++s)
      prior_regression_step(pair, cfg, tc, tc.lr, rehearse_rng, &result.skipped_updates);

    RoundStats rs;
    rs.round = round;
    for (int s = 0; s < tc.steps_per_collection; ++s) {
      const StepStats st = train_iteration(pair, buffer, tc, batch_rng);
      if (!st.applied) ++result.skipped_updates;
      if (!std::isfinite(st.total) || st.total > 1e6) {
        if (!out_dir.empty()) pair.save(out_dir + "/diverged.json");
        throw TrainingDiverged("training loss diverged at round " + std::to_string(round) +
                               " step " + std::to_string(s) + " (L=" + std::to_string(st.total) +
                               ")");
      }
      rs.loss += st.total;
      rs.lc_init += st.lc_init;
      rs.lc_dang += st.lc_dang;
      rs.lc_deriv += st.lc_deriv;
      rs.lg += st.lg;
      ++cumulative_steps;
    }
    const double inv = 1.0 / static_cast<double>(tc.steps_per_collection);
    rs.loss *= inv;
    rs.lc_init *= inv;
    rs.lc_dang *= inv;
    rs.lc_deriv *= inv;
    rs.lg *= inv;
    rs.cumulative_steps = cumulative_steps;

    const ProbeMetrics pm = run_probe(pair, cfg, tc);
    rs.probe_safety_rate = pm.safety_rate;
    rs.eps_hat = pm.eps_hat;
    result.rounds.push_back(rs);
    round_losses.push_back(rs.loss);

    if (history) {
      write_history_row(history, rs);
      history.flush();
    }
    if (!out_dir.empty()) pair.save(out_dir + "/checkpoint.json");

    const int w = tc.convergence_window;
    if (static_cast<int>(round_losses.size()) >= 2 * w) {
      const auto tail = round_losses.end();
      const double last = std::accumulate(tail - w, tail, 0.0) / w;
      const double prev = std::accumulate(tail - 2 * w, tail - w, 0.0) / w;
      if ((prev - last) / std::max(std::abs(prev), 1e-12) < tc.convergence_tol) {
        result.converged_early = true;
        break;
      }
    }
  }
  return result;
}

}  // namespace scbf
