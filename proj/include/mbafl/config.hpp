#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbafl/attacks.hpp"
#include "mbafl/defenses.hpp"
#include "mbafl/model.hpp"
#include "mbafl/training.hpp"

namespace mbafl {

struct DataSection {
  std::string dataset = "cifar10";
  std::string root;  // empty: $MBAFL_DATA_ROOT, else ./data
  std::int64_t train_subset = 10000;
  std::int64_t test_subset = 1000;
  std::int64_t asr_subset = 500;  // non-target test samples per attacker
  double alpha = 1.0;
  std::int64_t clients = 20;
};

struct FlSection {
  std::int64_t clients_per_round = 5;
  std::int64_t rounds = 220;
  std::int64_t attack_start = 60;  // warmup length
  std::int64_t attack_window = 40;
  std::int64_t eval_every = 5;     // cadence before the window
  SgdOptions local;
  std::string arch = "small-cnn";
  std::int64_t threads = 1;
  std::string init_checkpoint;     // warm start from another run's checkpoint
};

struct AttackSection {
  std::string method = "none";  // none | vanilla | pgd | neurotoxin | mirage
  std::vector<std::int64_t> targets;
  std::vector<std::int64_t> client_ids;  // default 0..k-1
  TriggerKind trigger = TriggerKind::blend;
  double blend = 0.2;
  PatchRegion patch;
  AttackSpec spec;  // method parameters shared by all attackers

  std::int64_t count() const { return static_cast<std::int64_t>(targets.size()); }
};

struct OutputSection {
  std::string dir = "runs/default";
  std::int64_t checkpoint_every = 20;
  bool embeddings = true;
  std::int64_t embeddings_per_class = 50;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DataSection data;
  FlSection fl;
  AttackSection attack;
  DefenseSpec defense;
  double lifespan_threshold = 0.9;
  OutputSection output;

  std::int64_t window_end() const { return fl.attack_start + fl.attack_window; }
  bool attack_enabled() const { return attack.method != "none" && attack.count() > 0; }
};

/// Parses a YAML file (with optional `include:` of a base file, resolved
/// relative to the including file), applies key=value overrides, fills
/// defaults and validates. ConfigError messages name the field path.
ExperimentConfig parse_config(const std::filesystem::path& path,
                              const std::vector<std::string>& overrides = {});
ExperimentConfig parse_config_text(const std::string& yaml, const std::vector<std::string>& overrides = {},
                                   const std::filesystem::path& base_dir = ".");

/// A recipe may carry a top-level `grid:` mapping of override keys to value
/// lists; each combination is one run. Returns {} for plain configs.
struct GridCell {
  std::string name;  // values joined with '-', used as the output subdirectory
  std::vector<std::string> overrides;
};
std::vector<GridCell> expand_grid(const std::filesystem::path& path);

void validate(const ExperimentConfig& cfg);

/// Fully resolved config; parse_config_text(to_yaml(c)) == c.
nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
std::string to_yaml(const ExperimentConfig& cfg);

/// FNV-1a over the resolved config without the output section.
std::string config_hash(const ExperimentConfig& cfg);

std::filesystem::path resolve_data_root(const ExperimentConfig& cfg);

}  // namespace mbafl
