#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "mbafl/attacks.hpp"
#include "mbafl/config.hpp"
#include "mbafl/data.hpp"
#include "mbafl/defenses.hpp"
#include "mbafl/metrics.hpp"
#include "mbafl/mirage.hpp"
#include "mbafl/model.hpp"

namespace mbafl {

/// Uniform sample of m of n client ids without replacement, ascending.
std::vector<std::int64_t> select_clients(std::uint64_t seed, std::int64_t round, std::int64_t n_clients,
                                         std::int64_t m);

/// Data the engine needs but never mutates.
struct Environment {
  DatasetSplit data;
  Partition partition;
  std::vector<Dataset> client_data;
  std::vector<Dataset> asr_sets;  // per attacker: non-target test samples
};

Environment prepare_environment(const ExperimentConfig& cfg);
/// Same, but with caller-supplied data (tests, synthetic runs).
Environment prepare_environment(const ExperimentConfig& cfg, DatasetSplit data);

struct FLState {
  std::int64_t round = 0;  // next round to run
  Model global;
  std::vector<AttackerState> attackers;
  std::vector<double> warmup_norms;                       // benign update norms before the window
  std::map<std::int64_t, Eigen::VectorXd> history;        // Foolsgold cumulative updates
};

FLState initial_state(const ExperimentConfig& cfg, const Environment& env);

/// theta_{t+1} = theta_t - aggregated delta, evaluated and recorded. On an
/// aggregation error the round is marked skipped and theta is unchanged.
RoundRecord run_round(FLState& state, const ExperimentConfig& cfg, const Environment& env);

bool should_evaluate(const ExperimentConfig& cfg, std::int64_t round);

/// Checkpoint: magic, version, JSON header (round, config hash, attacker
/// metadata), then raw payloads.
void save_checkpoint(const FLState& state, const ExperimentConfig& cfg, const std::filesystem::path& path);
/// With strict=true the config hash must match (resume); otherwise only the
/// model, round and warmup statistics are taken (warm start).
FLState load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg, const Environment& env,
                        bool strict);

struct ExperimentResult {
  FLState state;
  std::vector<RoundRecord> records;
  RunSummary summary;
  std::vector<double> id_margin;  // per attacker, final model
};

struct RunOptions {
  bool resume = false;
  // called after each round (progress output)
  std::function<void(const RoundRecord&)> on_round;
};

/// Runs cfg.fl.rounds rounds, writing into cfg.output.dir:
/// manifest.json, config.yaml, results.jsonl, checkpoints/, triggers/,
/// summary.json and embeddings.csv.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});
ExperimentResult run_experiment(const ExperimentConfig& cfg, const Environment& env, const RunOptions& options = {});

std::string code_version();

}  // namespace mbafl
