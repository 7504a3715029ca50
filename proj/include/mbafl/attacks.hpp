#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "mbafl/data.hpp"
#include "mbafl/mirage.hpp"
#include "mbafl/model.hpp"
#include "mbafl/training.hpp"
#include "mbafl/trigger.hpp"

namespace mbafl {

enum class AttackMethod { vanilla, pgd, neurotoxin, mirage };
AttackMethod parse_attack_method(std::string_view name);
std::string to_string(AttackMethod method);

struct AttackSpec {
  AttackMethod method = AttackMethod::vanilla;
  std::int64_t target_class = 0;
  TriggerKind trigger_kind = TriggerKind::blend;
  double poison_fraction = 0.125;
  double scale = 1.0;        // vanilla gamma
  double pgd_radius = 0.0;   // epsilon; <= 0 means "calibrate from warmup"
  double mask_ratio = 0.05;  // neurotoxin k
  SgdOptions local;
  MirageConfig mirage;       // used when method == mirage

  void validate() const;
};

ClientUpdate vanilla_round(const Model& global_model, const Dataset& client_data, const Trigger& trigger,
                           const AttackSpec& spec, std::uint64_t seed, std::int64_t client_id = -1);

ClientUpdate pgd_round(const Model& global_model, const Dataset& client_data, const Trigger& trigger,
                       const AttackSpec& spec, double radius, std::uint64_t seed,
                       std::int64_t client_id = -1);

ClientUpdate neurotoxin_round(const Model& global_model, const Dataset& client_data, const Trigger& trigger,
                              const AttackSpec& spec, std::uint64_t seed, std::int64_t client_id = -1);

/// Nearest point of the closed L2 ball of the given radius around center.
Eigen::VectorXd project_l2_ball(const Eigen::VectorXd& v, const Eigen::VectorXd& center, double radius);

/// Flags the floor(ratio * n) entries of largest magnitude; ties go to the
/// lower index.
std::vector<bool> top_k_mask(const Eigen::VectorXd& magnitude, double ratio);

/// Sum of clean-data gradients at theta_t over one pass, flattened in
/// layout order (non-trainable slots are 0).
Eigen::VectorXd benign_gradient(const Model& global_model, const Dataset& client_data,
                                std::int64_t batch_size);

}  // namespace mbafl
