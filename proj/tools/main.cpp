#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "scbf/evaluator.hpp"
#include "scbf/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using namespace scbf;

std::string fnv1a_file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "";
  std::uint64_t h = 14695981039346656037ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct CommonArgs {
  std::string scenario, checkpoint, out, train_config;
  std::uint64_t seed = 0;
  int agents = 0;  // 0 = keep the scenario's count
  int episodes = 10;
  std::string refine = "on";
  int jobs = static_cast<int>(std::thread::hardware_concurrency());
  int rounds = 0;  // 0 = trainer default
  int steps = 0;
  bool trajectories = true;
};

void ensure_out_dir(const std::string& out) {
  if (out.empty()) throw ConfigError("--out directory is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory " + out + ": " + ec.message());
}

ScenarioConfig load_scenario(const CommonArgs& a) {
  if (!fs::exists(a.scenario)) throw ConfigError("scenario file not found: " + a.scenario);
  ScenarioConfig cfg = ScenarioConfig::load(a.scenario);
  if (a.agents > 0) cfg = cfg.with_agents(a.agents);
  return cfg;
}

void write_manifest(const std::string& command, const CommonArgs& a,
                    const std::string& checkpoint_hash) {
  nlohmann::json j;
  j["command"] = command;
  j["scenario"] = a.scenario;
  j["train_config"] = a.train_config;
  j["checkpoint"] = a.checkpoint;
  j["seeds"] = {a.seed};
  j["out"] = a.out;
  j["refine"] = a.refine;
  j["agents"] = a.agents;
  j["episodes"] = a.episodes;
  j["jobs"] = a.jobs;
  j["rounds"] = a.rounds;
  j["steps"] = a.steps;
  j["checkpoint_hash"] = checkpoint_hash;
  j["format_version"] = kCheckpointFormatVersion;
  std::ofstream out(a.out + "/manifest.json");
  if (!out) throw ConfigError("cannot write manifest in " + a.out);
  out << j.dump(2) << "\n";
}

int cmd_train(const CommonArgs& a) {
  ensure_out_dir(a.out);
  const ScenarioConfig cfg = load_scenario(a);
  TrainConfig tc;
  if (!a.train_config.empty()) {
    if (!fs::exists(a.train_config))
      throw ConfigError("train config not found: " + a.train_config);
    tc = TrainConfig::load(a.train_config);
  }
  if (cfg.dynamics.model == DynamicsModel::Drone3D && a.train_config.empty() && a.rounds == 0)
    tc.outer_iterations = 100;
  tc.seed = a.seed;
  if (a.rounds > 0) tc.outer_iterations = a.rounds;
  if (a.steps > 0) tc.steps_per_collection = a.steps;

  CertificatePair pair = CertificatePair::init(cfg.dynamics, a.seed);
  const TrainResult result = train(pair, cfg, tc, a.out);
  pair.save(a.out + "/checkpoint.json");
  write_manifest("train", a, fnv1a_file_hash(a.out + "/checkpoint.json"));
  std::cout << "trained " << result.rounds.size() << " rounds"
            << (result.converged_early ? " (converged)" : "") << ", final L="
            << (result.rounds.empty() ? 0.0 : result.rounds.back().loss) << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& a) {
  ensure_out_dir(a.out);
  const ScenarioConfig cfg = load_scenario(a);
  if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint);
  if (checkpoint_kind(a.checkpoint) != dynamics_model_name(cfg.dynamics.model))
    throw ConfigError("checkpoint dynamics kind does not match the scenario");
  const CertificatePair pair = CertificatePair::load(cfg.dynamics, a.checkpoint);
  const bool refine_on = a.refine == "on";
  std::vector<Rollout> rollouts;
  const EpisodeMetrics m =
      evaluate(pair, cfg, a.episodes, refine_on, a.seed, a.jobs, &rollouts);
  const std::string hash = fnv1a_file_hash(a.checkpoint);
  write_metrics_json(a.out + "/metrics.json", m, cfg, refine_on, a.seed, hash);
  if (a.trajectories) write_trajectories_csv(a.out + "/trajectories.csv", rollouts);
  write_manifest("eval", a, hash);
  std::cout << "safety_rate=" << m.safety_rate << " reward=" << m.mean_reward
            << " goal_fraction=" << m.goal_reached_fraction << " opr=" << m.opr_proportion
            << " eps_hat=" << m.eps_hat << "\n";
  return 0;
}

int cmd_landscape(const CommonArgs& a, const LandscapeSpec& spec) {
  ensure_out_dir(a.out);
  const ScenarioConfig cfg = load_scenario(a);
  if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint);
  if (checkpoint_kind(a.checkpoint) != dynamics_model_name(cfg.dynamics.model))
    throw ConfigError("checkpoint dynamics kind does not match the scenario");
  const CertificatePair pair = CertificatePair::load(cfg.dynamics, a.checkpoint);
  LandscapeSpec s = spec;
  if (s.r_max <= 0.0) s.r_max = cfg.obs_radius;
  const Eigen::MatrixXd grid = landscape(pair, s);
  if (!grid.allFinite()) throw NumericError("non-finite landscape values");
  write_landscape_csv(a.out + "/landscape.csv", s, grid);
  write_manifest("landscape", a, fnv1a_file_hash(a.checkpoint));
  std::cout << "landscape " << s.n_r << "x" << s.n_c << " written\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized safe multi-agent control: joint policy/CBF training,"
               " evaluation with online refinement, and certificate inspection"};
  app.require_subcommand(1);

  CommonArgs a;
  LandscapeSpec spec;
  spec.r_max = 0.0;  // filled from the scenario's observation radius

  auto* train_cmd = app.add_subcommand("train", "train a policy/certificate pair");
  train_cmd->add_option("--scenario", a.scenario, "scenario JSON")->required();
  train_cmd->add_option("--out", a.out, "output directory")->required();
  train_cmd->add_option("--seed", a.seed, "RNG seed");
  train_cmd->add_option("--agents", a.agents, "override agent count (density scaled)");
  train_cmd->add_option("--train-config", a.train_config, "training config JSON");
  train_cmd->add_option("--rounds", a.rounds, "override collection/update rounds");
  train_cmd->add_option("--steps", a.steps, "override update steps per round");
  train_cmd->add_option("--jobs", a.jobs, "worker threads");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--scenario", a.scenario, "scenario JSON")->required();
  eval_cmd->add_option("--checkpoint", a.checkpoint, "checkpoint JSON")->required();
  eval_cmd->add_option("--out", a.out, "output directory")->required();
  eval_cmd->add_option("--seed", a.seed, "RNG seed");
  eval_cmd->add_option("--agents", a.agents, "override agent count (density scaled)");
  eval_cmd->add_option("--episodes", a.episodes, "number of evaluation episodes");
  eval_cmd->add_option("--refine", a.refine, "online policy refinement")
      ->check(CLI::IsMember({"on", "off"}));
  eval_cmd->add_option("--jobs", a.jobs, "worker threads");
  eval_cmd->add_flag("--trajectories,!--no-trajectories", a.trajectories,
                     "write per-step trajectory CSV");

  auto* land_cmd = app.add_subcommand("landscape", "export a certificate slice");
  land_cmd->add_option("--scenario", a.scenario, "scenario JSON")->required();
  land_cmd->add_option("--checkpoint", a.checkpoint, "checkpoint JSON")->required();
  land_cmd->add_option("--out", a.out, "output directory")->required();
  land_cmd->add_option("--rmin", spec.r_min, "min relative distance");
  land_cmd->add_option("--rmax", spec.r_max, "max relative distance (default: obs radius)");
  land_cmd->add_option("--cmin", spec.c_min, "min closing speed");
  land_cmd->add_option("--cmax", spec.c_max, "max closing speed");
  land_cmd->add_option("--nr", spec.n_r, "distance grid size");
  land_cmd->add_option("--nc", spec.n_c, "speed grid size");

  try {
    app.parse(argc, argv);
    if (train_cmd->parsed()) return cmd_train(a);
    if (eval_cmd->parsed()) return cmd_eval(a);
    return cmd_landscape(a, spec);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  } catch (const PlacementError& e) {
    std::cerr << "placement error: " << e.what() << "\n";
    return 4;
  } catch (const TrainingDiverged& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
