#include "mbafl/attacks.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

#include "mbafl/errors.hpp"
#include "mbafl/rng.hpp"

namespace mbafl {

AttackMethod parse_attack_method(std::string_view name) {
  if (name == "vanilla") return AttackMethod::vanilla;
  if (name == "pgd") return AttackMethod::pgd;
  if (name == "neurotoxin") return AttackMethod::neurotoxin;
  if (name == "mirage") return AttackMethod::mirage;
  throw ConfigError("unknown attack method '" + std::string(name) + "'");
}

std::string to_string(AttackMethod method) {
  switch (method) {
    case AttackMethod::vanilla: return "vanilla";
    case AttackMethod::pgd: return "pgd";
    case AttackMethod::neurotoxin: return "neurotoxin";
    case AttackMethod::mirage: return "mirage";
  }
  return "?";
}

void AttackSpec::validate() const {
  if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) throw ConfigError("poison_fraction must lie in [0,1]");
  if (method == AttackMethod::neurotoxin && !(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
    throw ConfigError("mask_ratio must lie in [0,1)");
  }
  if (method == AttackMethod::mirage) mirage.validate();
}

namespace {

ClientUpdate finish(const Model& global_model, const Model& local, const Dataset& data,
                    std::int64_t client_id, std::size_t poisoned) {
  ClientUpdate u;
  u.client_id = client_id;
  u.sample_count = data.size();
  u.delta = subtract(to_vector(global_model), to_vector(local));
  u.diagnostics["poisoned"] = poisoned;
  return u;
}

}  // namespace

ClientUpdate vanilla_round(const Model& global_model, const Dataset& client_data, const Trigger& trigger,
                           const AttackSpec& spec, std::uint64_t seed, std::int64_t client_id) {
  const auto poisoned = poison_dataset(client_data, trigger, spec.target_class, spec.poison_fraction,
                                       derive_seed(seed, Stream::poison));
  auto local = global_model.clone();
  train_sgd(local, poisoned.data, spec.local, seed);
  auto u = finish(global_model, local, client_data, client_id, poisoned.poisoned_positions.size());
  u.delta.values *= spec.scale;
  return u;
}

Eigen::VectorXd project_l2_ball(const Eigen::VectorXd& v, const Eigen::VectorXd& center, double radius) {
  const Eigen::VectorXd d = v - center;
  const double norm = d.norm();
  if (norm <= radius) return v;
  if (radius <= 0.0) return center;
  return center + d * (radius / norm);
}

ClientUpdate pgd_round(const Model& global_model, const Dataset& client_data, const Trigger& trigger,
                       const AttackSpec& spec, double radius, std::uint64_t seed, std::int64_t client_id) {
  if (radius < 0.0) throw ConfigError("pgd radius must be non-negative");
  const auto poisoned = poison_dataset(client_data, trigger, spec.target_class, spec.poison_fraction,
                                       derive_seed(seed, Stream::poison));
  const auto center = to_vector(global_model).values;
  auto local = global_model.clone();
  TrainHooks hooks;
  hooks.after_epoch = [&](Net&, std::int64_t) {
    from_vector(local, project_l2_ball(to_vector(local).values, center, radius));
  };
  train_sgd(local, poisoned.data, spec.local, seed, hooks);
  auto u = finish(global_model, local, client_data, client_id, poisoned.poisoned_positions.size());
  u.diagnostics["radius"] = radius;
  return u;
}

std::vector<bool> top_k_mask(const Eigen::VectorXd& magnitude, double ratio) {
  const auto n = static_cast<std::size_t>(magnitude.size());
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  std::vector<bool> mask(n, false);
  if (k == 0) return mask;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double ma = std::abs(magnitude[static_cast<Eigen::Index>(a)]);
                      const double mb = std::abs(magnitude[static_cast<Eigen::Index>(b)]);
                      return ma != mb ? ma > mb : a < b;
                    });
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = true;
  return mask;
}

Eigen::VectorXd benign_gradient(const Model& global_model, const Dataset& client_data, std::int64_t batch_size) {
  auto probe = global_model.clone();
  auto& net = probe.net();
  net->eval();
  for (auto& p : net->parameters()) {
    if (p.grad().defined()) p.grad().zero_();
  }
  const auto n = client_data.size();
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const auto end = std::min(n, start + batch_size);
    const auto loss = torch::nn::functional::cross_entropy(net->forward(client_data.images.slice(0, start, end)),
                                                           client_data.labels.slice(0, start, end));
    loss.backward();
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(probe.parameter_count());
  const auto& entries = probe.layout()->entries;
  std::size_t i = 0;
  for (const auto& p : net->parameters()) {
    const auto& e = entries[i++];
    if (!p.grad().defined()) continue;
    const auto t = p.grad().to(torch::kFloat64).contiguous();
    std::memcpy(g.data() + e.offset, t.data_ptr<double>(), static_cast<std::size_t>(e.numel) * sizeof(double));
  }
  return g;
}

ClientUpdate neurotoxin_round(const Model& global_model, const Dataset& client_data, const Trigger& trigger,
                              const AttackSpec& spec, std::uint64_t seed, std::int64_t client_id) {
  const auto grad = benign_gradient(global_model, client_data, spec.local.batch_size);
  const auto mask = top_k_mask(grad, spec.mask_ratio);

  // per-parameter keep masks (1 = may move)
  const auto& entries = global_model.layout()->entries;
  std::vector<torch::Tensor> keep;
  std::vector<float> buf;
  for (const auto& e : entries) {
    if (!e.trainable) continue;
    buf.assign(static_cast<std::size_t>(e.numel), 1.0f);
    for (std::int64_t j = 0; j < e.numel; ++j) {
      if (mask[static_cast<std::size_t>(e.offset + j)]) buf[static_cast<std::size_t>(j)] = 0.0f;
    }
    keep.push_back(torch::tensor(buf).view(e.shape));
  }

  const auto poisoned = poison_dataset(client_data, trigger, spec.target_class, spec.poison_fraction,
                                       derive_seed(seed, Stream::poison));
  auto local = global_model.clone();
  TrainHooks hooks;
  hooks.after_backward = [&](Net& net) {
    std::size_t i = 0;
    for (auto& p : net->parameters()) {
      if (p.grad().defined()) p.grad().mul_(keep[i]);
      ++i;
    }
  };
  train_sgd(local, poisoned.data, spec.local, seed, hooks);
  auto u = finish(global_model, local, client_data, client_id, poisoned.poisoned_positions.size());
  // weight decay still nudges masked weights through the optimizer, so the
  // restriction is enforced on the update itself as well
  std::int64_t masked = 0;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (mask[j]) {
      u.delta.values[static_cast<Eigen::Index>(j)] = 0.0;
      ++masked;
    }
  }
  u.diagnostics["masked"] = masked;
  return u;
}

}  // namespace mbafl
