#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scbf/rollout.hpp"

namespace scbf {

struct TrainConfig {
  double iota = 0.05;          // exploration probability during collection
  int batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 1e-6;
  int outer_iterations = 60;   // collection/update rounds (use 100 for 3D)
  int steps_per_collection = 500;
  double convergence_tol = 1e-3;  // relative improvement over the window
  int convergence_window = 5;
  std::uint64_t seed = 0;
  int episodes_per_collection = 2;
  int probe_episodes = 4;
  bool strict_x0 = false;
  // Target share of dangerous-region samples per batch. On-policy data is
  // heavily safe-dominated once the policy is any good; without oversampling
  // the dangerous hinge starves and h collapses to a constant.
  double dangerous_fraction = 0.33;
  // Supervised steps fitting h to the clipped separation margin before the
  // first joint round. Starting at margin scale gives the certificate slopes
  // the refiner and the policy can actually use.
  int pretrain_steps = 2500;
  // Synthetic-prior regression steps interleaved with every joint round.
  // Conflict behavior lives in a thin slice of input space; without
  // rehearsal the bulk imitation gradients slowly overwrite it.
  int rehearsal_steps = 60;
  std::size_t buffer_capacity = 262144;

  void validate() const;
  static TrainConfig load(const std::string& path);  // JSON, every field optional
};

// Ring of training samples; flushed before each collection round so updates
// only ever see data from the current policy iterate.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  void add(CbfSample sample);
  void clear();
  std::size_t size() const { return samples_.size(); }
  std::size_t inserted() const { return inserted_; }
  const CbfSample& operator[](std::size_t i) const { return samples_[i]; }
  // Draw without replacement within this call (all samples if k >= size).
  std::vector<const CbfSample*> sample(int k, Rng& rng) const;
  // Like sample(), but fills up to dangerous_fraction of the draw from the
  // dangerous-region pool first (all of it when the pool is smaller).
  std::vector<const CbfSample*> sample_balanced(int k, double dangerous_fraction,
                                                Rng& rng) const;

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::size_t inserted_ = 0;
  std::vector<CbfSample> samples_;
};

struct StepStats {
  double total = 0.0, lc_init = 0.0, lc_dang = 0.0, lc_deriv = 0.0, lg = 0.0;
  bool applied = true;
};

struct RoundStats {
  int round = 0;
  long cumulative_steps = 0;
  double loss = 0.0, lc_init = 0.0, lc_dang = 0.0, lc_deriv = 0.0, lg = 0.0;
  double probe_safety_rate = 0.0;
  double eps_hat = 0.0;
};

struct TrainResult {
  RoundStats baseline;             // losses/probe at initialization (round 0)
  std::vector<RoundStats> rounds;  // one entry per executed round
  bool converged_early = false;
  int skipped_updates = 0;  // non-finite gradients
};

// Runs episodes under the current pair (random action with probability iota)
// and appends the per-step samples.
void collect(const CertificatePair& pair, const ScenarioConfig& cfg, const TrainConfig& tc,
             std::uint64_t round_seed, ReplayBuffer& buffer);

// One SGD step on a fresh batch draw.
StepStats train_iteration(CertificatePair& pair, const ReplayBuffer& buffer,
                          const TrainConfig& tc, Rng& rng);

// Alternating collection and update rounds until outer_iterations or the
// windowed loss improvement drops below convergence_tol. When out_dir is
// non-empty writes history.csv (round,step,L,Lc0,Lcd,Lch,Lg,
// probe_safety_rate,eps_hat) and a checkpoint every round. Throws
// TrainingDiverged when the loss passes 1e6.
TrainResult train(CertificatePair& pair, const ScenarioConfig& cfg, const TrainConfig& tc,
                  const std::string& out_dir = "");

}  // namespace scbf
