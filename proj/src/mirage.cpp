#include "mbafl/mirage.hpp"

#include <algorithm>
#include <numeric>

#include "mbafl/errors.hpp"
#include "mbafl/rng.hpp"

namespace mbafl {

namespace F = torch::nn::functional;

StepRule parse_step_rule(std::string_view name) {
  if (name == "sign") return StepRule::sign;
  if (name == "gradient") return StepRule::gradient;
  throw ConfigError("unknown trigger step rule '" + std::string(name) + "'");
}

std::string to_string(StepRule rule) { return rule == StepRule::sign ? "sign" : "gradient"; }

void MirageConfig::validate() const {
  if (adversarial_epochs < 0) throw ConfigError("adversarial_epochs must be >= 0");
  if (!(trigger_lr > 0.0)) throw ConfigError("trigger_lr must be positive");
  if (!(poison_fraction > 0.0 && poison_fraction <= 1.0)) throw ConfigError("poison_fraction must lie in (0,1]");
  if (trigger_batch_size < 1 || detector.batch_size < 1) throw ConfigError("batch sizes must be positive");
  if (detector.epochs < 0 || !(detector.lr > 0.0)) throw ConfigError("invalid detector options");
}

DetectorTrainResult train_head(torch::nn::Linear& head, const torch::Tensor& features,
                               const torch::Tensor& labels, const DetectorOptions& options,
                               std::uint64_t seed) {
  const auto n = features.size(0);
  const auto pos = labels.sum().item<double>();
  if (n == 0 || pos == 0.0 || pos == static_cast<double>(n)) {
    throw AttackerSetupError("detector dataset holds a single class");
  }
  DetectorTrainResult result;
  torch::optim::Adam opt(head->parameters(), torch::optim::AdamOptions(options.lr));
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, Stream::detector, {static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    const auto perm = torch::tensor(order, torch::kInt64);
    for (std::int64_t start = 0; start < n; start += options.batch_size) {
      const auto idx = perm.slice(0, start, std::min(n, start + options.batch_size));
      opt.zero_grad();
      auto loss = F::binary_cross_entropy_with_logits(head->forward(features.index_select(0, idx)).squeeze(-1),
                                                      labels.index_select(0, idx));
      loss.backward();
      opt.step();
    }
  }
  torch::NoGradGuard guard;
  const auto logits = head->forward(features).squeeze(-1);
  result.final_loss = F::binary_cross_entropy_with_logits(logits, labels).item<double>();
  result.train_accuracy = ((logits > 0).to(torch::kFloat32) == labels).to(torch::kFloat64).mean().item<double>();
  return result;
}

DetectorTrainResult train_detector(Detector& detector, const DetectorDataset& data,
                                   const DetectorOptions& options, std::uint64_t seed) {
  torch::Tensor features;
  {
    torch::NoGradGuard guard;
    detector.body->eval();
    std::vector<torch::Tensor> parts;
    for (std::int64_t i = 0; i < data.images.size(0); i += 500) {
      parts.push_back(detector.body->features(data.images.slice(0, i, std::min(data.images.size(0), i + 500))));
    }
    features = torch::cat(parts);
  }
  return train_head(detector.head, features, data.labels, options, seed);
}

torch::Tensor detector_loss(Detector& detector, const torch::Tensor& images, const Trigger& trigger,
                            const torch::Tensor& pattern) {
  if (images.size(0) == 0) throw ShapeError("detector_loss on an empty batch");
  const auto logits = detector.logits(apply_trigger(images, trigger, pattern));
  return F::binary_cross_entropy_with_logits(logits, torch::ones_like(logits));
}

torch::Tensor safe_cosine(const torch::Tensor& a, const torch::Tensor& b, std::int64_t* zero_norm) {
  const auto na = a.norm(2, 1);
  const auto nb = b.norm(2, 1);
  const auto denom = na * nb;
  const auto valid = denom > 0;
  if (zero_norm) *zero_norm += (~valid).sum().item<std::int64_t>();
  const auto dot = (a * b).sum(1);
  // The clamp keeps the discarded branch of where() finite; an inf there
  // would turn into NaN in the backward pass. 1e-30 survives float32.
  return torch::where(valid, dot / denom.clamp_min(1e-30), torch::zeros_like(dot));
}

EnhancementTerms enhancement_loss(Net& local_model, Net& feature_model, const torch::Tensor& images,
                                  const Trigger& trigger, const torch::Tensor& pattern,
                                  std::int64_t target_class) {
  if (images.size(0) == 0) throw ShapeError("enhancement_loss on an empty batch");
  EnhancementTerms t;
  const auto triggered = apply_trigger(images, trigger, pattern);
  const auto targets = torch::full({images.size(0)}, target_class, torch::kInt64);
  t.cross_entropy = F::cross_entropy(local_model->forward(triggered), targets);
  torch::Tensor clean;
  {
    torch::NoGradGuard guard;
    clean = feature_model->features(images);
  }
  t.cosine = safe_cosine(clean, feature_model->features(triggered), &t.zero_norm).mean();
  return t;
}

ObjectiveTerms mirage_objective(Detector& detector, const torch::Tensor& images, const Trigger& trigger,
                                const torch::Tensor& pattern, const MirageConfig& cfg) {
  ObjectiveTerms out;
  auto& net = detector.body;
  const auto triggered = apply_trigger(images, trigger, pattern);
  const auto feats = net->features(triggered);
  const auto det_logits = detector.logits_from_features(feats);
  const auto l_det = F::binary_cross_entropy_with_logits(det_logits, torch::ones_like(det_logits));
  out.total = cfg.detector_weight * l_det;
  out.detector = l_det.item<double>();
  if (cfg.enhancement_enabled) {
    const auto targets = torch::full({images.size(0)}, cfg.target_class, torch::kInt64);
    const auto l_ce = F::cross_entropy(net->classifier->forward(feats), targets);
    torch::Tensor clean;
    {
      torch::NoGradGuard guard;
      clean = net->features(images);
    }
    const auto l_cs = safe_cosine(clean, feats, &out.zero_norm).mean();
    out.total = out.total + cfg.ce_weight * l_ce + cfg.cs_weight * l_cs;
    out.cross_entropy = l_ce.item<double>();
    out.cosine = l_cs.item<double>();
  }
  return out;
}

namespace {

void install_head(Detector& detector, const AttackerState& state) {
  torch::NoGradGuard guard;
  detector.head->weight.copy_(state.head_weight);
  detector.head->bias.copy_(state.head_bias);
}

double fooling_rate(Detector& detector, const Dataset& data, const Trigger& trigger, std::int64_t target) {
  const auto labels = data.label_vector();
  std::vector<std::int64_t> others;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != target) others.push_back(static_cast<std::int64_t>(i));
  }
  if (others.empty()) return 0.0;
  torch::NoGradGuard guard;
  const auto x = apply_trigger(data.images.index_select(0, torch::tensor(others, torch::kInt64)), trigger);
  const auto logits = detector.logits(x);
  return (logits > 0).to(torch::kFloat64).mean().item<double>();
}

}  // namespace

nlohmann::json optimize_trigger(const Model& global_model, const Dataset& client_data, AttackerState& state,
                                const MirageConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  validate_trigger(state.trigger);
  nlohmann::json epochs = nlohmann::json::array();
  if (cfg.adversarial_epochs == 0) return {{"epochs", epochs}};

  auto detector = build_detector(global_model, derive_seed(seed, Stream::detector));
  const bool resume_head = cfg.detector.fine_tune && state.head_weight.defined();
  if (resume_head) install_head(detector, state);

  const auto n = client_data.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t e = 0; e < cfg.adversarial_epochs; ++e) {
    const auto epoch_seed = derive_seed(seed, Stream::trigger, {static_cast<std::uint64_t>(e)});
    const auto dd = build_detector_dataset(client_data, state.trigger, cfg.target_class, epoch_seed);
    if (!cfg.detector.fine_tune && e > 0) reset_detector_head(detector, epoch_seed);
    const auto det = train_detector(detector, dd, cfg.detector, epoch_seed);

    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(epoch_seed, Stream::trigger, {0xba7c});
    std::shuffle(order.begin(), order.end(), rng);
    const auto perm = torch::tensor(order, torch::kInt64);

    double loss_sum = 0.0, det_sum = 0.0, ce_sum = 0.0, cs_sum = 0.0;
    std::int64_t zero_norm = 0;
    for (std::int64_t start = 0; start < n; start += cfg.trigger_batch_size) {
      const auto idx = perm.slice(0, start, std::min(n, start + cfg.trigger_batch_size));
      const auto batch = client_data.images.index_select(0, idx);
      auto pattern = state.trigger.pattern.detach().clone().requires_grad_(true);
      const auto terms = mirage_objective(detector, batch, state.trigger, pattern, cfg);
      const auto grad = torch::autograd::grad({terms.total}, {pattern})[0];
      torch::NoGradGuard guard;
      const auto step = cfg.step == StepRule::sign ? grad.sign() : grad;
      state.trigger.pattern = (state.trigger.pattern - cfg.trigger_lr * step).clamp(0.0, 1.0);
      const auto w = static_cast<double>(idx.size(0));
      loss_sum += terms.total.item<double>() * w;
      det_sum += terms.detector * w;
      ce_sum += terms.cross_entropy * w;
      cs_sum += terms.cosine * w;
      zero_norm += terms.zero_norm;
    }
    const auto nd = static_cast<double>(n);
    epochs.push_back({{"detector_accuracy", det.train_accuracy},
                      {"detector_samples", dd.size()},
                      {"loss", loss_sum / nd},
                      {"loss_detector", det_sum / nd},
                      {"loss_ce", ce_sum / nd},
                      {"loss_cs", cs_sum / nd},
                      {"zero_norm", zero_norm}});
  }
  {
    torch::NoGradGuard guard;
    state.head_weight = detector.head->weight.detach().clone();
    state.head_bias = detector.head->bias.detach().clone();
  }
  nlohmann::json out = {{"epochs", epochs},
                        {"fooling_rate", fooling_rate(detector, client_data, state.trigger, cfg.target_class)}};
  return out;
}

ClientUpdate mirage_round(const Model& global_model, const Dataset& client_data, AttackerState& state,
                          const MirageConfig& cfg, std::uint64_t seed) {
  auto diag = optimize_trigger(global_model, client_data, state, cfg, seed);
  const auto poisoned = poison_dataset(client_data, state.trigger, cfg.target_class, cfg.poison_fraction,
                                       derive_seed(seed, Stream::poison));
  auto local = global_model.clone();
  const auto stats = train_sgd(local, poisoned.data, cfg.local, seed);
  ClientUpdate u;
  u.client_id = state.client_id;
  u.sample_count = client_data.size();
  u.delta = subtract(to_vector(global_model), to_vector(local));
  diag["poisoned"] = poisoned.poisoned_positions.size();
  diag["train_loss"] = stats.epoch_loss;
  diag["trigger_checksum"] = trigger_checksum(state.trigger);
  u.diagnostics = std::move(diag);
  state.history.push_back(u.diagnostics);
  return u;
}

}  // namespace mbafl
