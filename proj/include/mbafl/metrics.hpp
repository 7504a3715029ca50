#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mbafl/data.hpp"
#include "mbafl/model.hpp"
#include "mbafl/trigger.hpp"

namespace mbafl {

double accuracy(const Model& model, const Dataset& test_set);

/// Fraction of triggered test samples with true label != target that the
/// model assigns to target.
double asr(const Model& model, const Dataset& test_set, const Trigger& trigger, std::int64_t target_class);

/// Fraction of correct entries; shared by accuracy() and tests.
double fraction_equal(const torch::Tensor& predicted, const torch::Tensor& expected);

double gap(const std::vector<double>& asrs);

/// Consecutive leading entries >= threshold.
std::int64_t lifespan(const std::vector<double>& asr_series, double threshold);

struct RoundRecord {
  std::int64_t round = 0;
  double accuracy = 0.0;
  std::vector<double> asr;  // one per attacker
  double asr_mean = 0.0;
  double gap = 0.0;
  std::string defense;
  std::vector<std::int64_t> selected_ids;
  std::vector<std::int64_t> accepted_ids;
  bool skipped = false;
  bool attack_active = false;
  bool evaluated = true;  // not serialized; unevaluated rounds are not written
  nlohmann::json defense_diagnostics = nlohmann::json::object();
  nlohmann::json attacker_diagnostics = nlohmann::json::array();

  /// Fills asr_mean and gap from asr.
  void finalize();
};

nlohmann::ordered_json to_json(const RoundRecord& r);
RoundRecord record_from_json(const nlohmann::json& j);

/// One JSON object per line; ReportError names the offending line.
std::vector<RoundRecord> read_records(const std::filesystem::path& path);

struct EmbeddingTable {
  Eigen::MatrixXd features;        // rows x feature_dim
  std::vector<std::int64_t> label; // true class of the source image
  std::vector<std::string> kind;   // "clean" or "attacker-<i>"

  std::int64_t rows() const { return features.rows(); }
};

struct EmbeddingRequest {
  std::int64_t per_class = 50;  // clean rows per class
  std::int64_t triggered = 200; // triggered rows per attacker
  std::vector<Trigger> triggers;
  std::vector<std::int64_t> targets;
};

EmbeddingTable export_embeddings(const Model& model, const Dataset& data, const EmbeddingRequest& request);
void write_embeddings_csv(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable read_embeddings_csv(const std::filesystem::path& path);

struct Projection {
  Eigen::MatrixXd points;  // rows x 2
  double explained_variance = 0.0;  // along the first axis
  bool rank_deficient = false;
};

Projection project_2d(const EmbeddingTable& table);

/// Mean cosine of triggered features to the clean target centroid minus
/// the largest mean cosine to any other clean class centroid.
double id_mapping_margin(const Model& model, const Dataset& test_set, const Trigger& trigger,
                         std::int64_t target_class, std::int64_t max_samples = 500);

struct RunSummary {
  std::int64_t tail_rounds = 0;
  double accuracy = 0.0;
  std::vector<double> asr;
  double asr_mean = 0.0;
  double gap = 0.0;
  std::int64_t lifespan = 0;
  double asr_at_horizon = 0.0;
};

/// Averages the last `tail` evaluated records; lifespan counts from the
/// first record with round >= window_end.
RunSummary summarize(const std::vector<RoundRecord>& records, std::int64_t tail, std::int64_t window_end,
                     double threshold);
nlohmann::json to_json(const RunSummary& s);

}  // namespace mbafl
