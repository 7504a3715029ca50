#include "mbafl/training.hpp"

#include <algorithm>
#include <numeric>

#include "mbafl/errors.hpp"
#include "mbafl/rng.hpp"

namespace mbafl {

TrainStats train_sgd(Model& model, const Dataset& data, const SgdOptions& options,
                     std::uint64_t seed, const TrainHooks& hooks) {
  if (options.batch_size < 1) throw ConfigError("batch size must be positive");
  TrainStats stats;
  if (options.epochs <= 0 || data.empty()) return stats;

  auto& net = model.net();
  std::vector<torch::Tensor> trainable;
  for (auto& p : net->parameters()) {
    if (p.requires_grad()) trainable.push_back(p);
  }
  torch::optim::SGD opt(trainable, torch::optim::SGDOptions(options.lr)
                                       .momentum(options.momentum)
                                       .weight_decay(options.weight_decay));
  net->train();

  const auto n = data.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, Stream::training, {static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    const auto perm = torch::tensor(order, torch::kInt64);

    double loss_sum = 0.0;
    for (std::int64_t start = 0; start < n; start += options.batch_size) {
      const auto idx = perm.slice(0, start, std::min(n, start + options.batch_size));
      const auto x = data.images.index_select(0, idx);
      const auto y = data.labels.index_select(0, idx);
      opt.zero_grad();
      auto loss = torch::nn::functional::cross_entropy(net->forward(x), y);
      loss.backward();
      if (hooks.after_backward) hooks.after_backward(net);
      opt.step();
      loss_sum += loss.item<double>() * static_cast<double>(idx.size(0));
      ++stats.steps;
    }
    stats.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    if (hooks.after_epoch) hooks.after_epoch(net, epoch);
  }
  net->eval();
  return stats;
}

ParamVector subtract(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) throw ShapeError("cannot subtract parameter vectors of different length");
  return {a.values - b.values, a.layout};
}

ClientUpdate benign_round(const Model& global_model, const Dataset& client_data,
                          const SgdOptions& options, std::uint64_t seed, std::int64_t client_id) {
  if (client_data.empty()) throw ConfigError("client " + std::to_string(client_id) + " has no data");
  auto local = global_model.clone();
  const auto stats = train_sgd(local, client_data, options, seed);
  ClientUpdate u;
  u.client_id = client_id;
  u.sample_count = client_data.size();
  u.delta = subtract(to_vector(global_model), to_vector(local));
  u.diagnostics["train_loss"] = stats.epoch_loss;
  return u;
}

}  // namespace mbafl
