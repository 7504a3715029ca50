#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <json.hpp>

#include "mbafl/data.hpp"
#include "mbafl/model.hpp"

namespace mbafl {

struct SgdOptions {
  std::int64_t epochs = 2;
  double lr = 0.01;
  std::int64_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct TrainHooks {
  // Runs between backward() and the optimizer step; may edit gradients.
  std::function<void(Net&)> after_backward;
  // Runs after the last step of each epoch (0-based); may edit parameters.
  std::function<void(Net&, std::int64_t)> after_epoch;
};

struct TrainStats {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
  std::int64_t steps = 0;
};

/// Mini-batch SGD on cross-entropy, in place. Batch order comes from
/// (seed, epoch) only.
TrainStats train_sgd(Model& model, const Dataset& data, const SgdOptions& options,
                     std::uint64_t seed, const TrainHooks& hooks = {});

/// One client's contribution: delta = theta_t - theta'.
struct ClientUpdate {
  std::int64_t client_id = -1;
  ParamVector delta;
  std::int64_t sample_count = 0;
  // Role-tagged detail for the results file. Never reaches aggregation.
  nlohmann::json diagnostics = nlohmann::json::object();
};

ParamVector subtract(const ParamVector& a, const ParamVector& b);

/// Clone theta_t, train locally, return the update.
ClientUpdate benign_round(const Model& global_model, const Dataset& client_data,
                          const SgdOptions& options, std::uint64_t seed,
                          std::int64_t client_id = -1);

}  // namespace mbafl
