#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mbafl/data.hpp"
#include "mbafl/model.hpp"
#include "mbafl/training.hpp"
#include "mbafl/trigger.hpp"

namespace mbafl {

enum class StepRule { sign, gradient };
StepRule parse_step_rule(std::string_view name);
std::string to_string(StepRule rule);

struct DetectorOptions {
  std::int64_t epochs = 30;
  double lr = 0.01;
  std::int64_t batch_size = 64;
  // Keep the previous head as the starting point instead of re-initializing
  // it every adversarial epoch.
  bool fine_tune = false;
};

struct MirageConfig {
  std::int64_t target_class = 0;
  std::int64_t adversarial_epochs = 2;
  double trigger_lr = 0.01;
  StepRule step = StepRule::sign;
  std::int64_t trigger_batch_size = 64;
  DetectorOptions detector;
  double poison_fraction = 0.125;
  SgdOptions local;
  bool enhancement_enabled = true;
  double detector_weight = 1.0;
  double ce_weight = 1.0;
  double cs_weight = 1.0;

  void validate() const;
};

struct AttackerState {
  std::int64_t attacker_id = 0;
  std::int64_t client_id = 0;
  Trigger trigger;
  torch::Tensor head_weight;  // last detector head, for fine_tune
  torch::Tensor head_bias;
  std::vector<nlohmann::json> history;
};

struct DetectorTrainResult {
  double train_accuracy = 0.0;
  double final_loss = 0.0;
};

/// Fits a one-logit linear head on fixed features with BCE (Adam).
DetectorTrainResult train_head(torch::nn::Linear& head, const torch::Tensor& features,
                               const torch::Tensor& labels, const DetectorOptions& options,
                               std::uint64_t seed);

/// Features come from the frozen body; only the head moves.
DetectorTrainResult train_detector(Detector& detector, const DetectorDataset& data,
                                   const DetectorOptions& options, std::uint64_t seed);

/// Mean BCE of detector(x (+) delta) against the '+' label.
torch::Tensor detector_loss(Detector& detector, const torch::Tensor& images, const Trigger& trigger,
                            const torch::Tensor& pattern);
inline torch::Tensor detector_loss(Detector& detector, const torch::Tensor& images,
                                   const Trigger& trigger) {
  return detector_loss(detector, images, trigger, trigger.pattern);
}

struct EnhancementTerms {
  torch::Tensor cross_entropy;  // mean CE(local(x (+) delta), c)
  torch::Tensor cosine;         // mean cos(f(x), f(x (+) delta))
  std::int64_t zero_norm = 0;   // pairs with a zero feature vector (scored 0)

  torch::Tensor total() const { return cross_entropy + cosine; }
};

/// Cosine similarity per row; rows where either side has zero norm score 0
/// and are counted in zero_norm.
torch::Tensor safe_cosine(const torch::Tensor& a, const torch::Tensor& b, std::int64_t* zero_norm);

EnhancementTerms enhancement_loss(Net& local_model, Net& feature_model, const torch::Tensor& images,
                                  const Trigger& trigger, const torch::Tensor& pattern,
                                  std::int64_t target_class);

struct ObjectiveTerms {
  torch::Tensor total;
  double detector = 0.0;
  double cross_entropy = 0.0;
  double cosine = 0.0;
  std::int64_t zero_norm = 0;
};

/// L_detector + L_Enhance on one batch, with the configured weights. The
/// detector body, the local copy and the feature extractor all hold theta_t
/// at this point, so a single forward pass of detector.body serves all
/// three terms.
ObjectiveTerms mirage_objective(Detector& detector, const torch::Tensor& images, const Trigger& trigger,
                                const torch::Tensor& pattern, const MirageConfig& cfg);

/// Adversarial trigger adaptation; updates state.trigger and returns
/// per-epoch diagnostics.
nlohmann::json optimize_trigger(const Model& global_model, const Dataset& client_data,
                                AttackerState& state, const MirageConfig& cfg, std::uint64_t seed);

/// Full attacker round: trigger adaptation, poisoning, local training.
ClientUpdate mirage_round(const Model& global_model, const Dataset& client_data, AttackerState& state,
                          const MirageConfig& cfg, std::uint64_t seed);

}  // namespace mbafl
