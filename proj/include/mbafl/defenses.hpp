#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace mbafl {

struct SubmittedUpdate {
  std::int64_t client_id = 0;
  Eigen::VectorXd delta;
  std::int64_t sample_count = 0;
};

/// Everything the server sees in a round. There is deliberately no role
/// information here.
struct AggregationInput {
  std::vector<SubmittedUpdate> updates;
  Eigen::VectorXd global;
  std::int64_t round = 0;
  // cumulative update sum per client, current round included (Foolsgold)
  std::map<std::int64_t, Eigen::VectorXd> history;
  std::uint64_t seed = 0;  // round-scoped, for FLAME noise
};

/// Compact audit view (ids, counts, norms).
nlohmann::json to_json(const AggregationInput& input);

struct AggregationResult {
  Eigen::VectorXd delta;
  std::vector<std::int64_t> accepted;  // ascending
  std::vector<double> weights;         // one per submitted update, id order
  nlohmann::json diagnostics = nlohmann::json::object();
};

AggregationResult fedavg(const AggregationInput& input, bool uniform = false);

/// Krum score per update (id order): sum of squared distances to the
/// n - f - 2 nearest other updates.
std::vector<double> krum_scores(const AggregationInput& input, std::int64_t f);
AggregationResult multikrum(const AggregationInput& input, std::int64_t f, std::int64_t m);

/// Foolsgold weights (id order) for the given history vectors.
std::vector<double> foolsgold_weights(const std::vector<Eigen::VectorXd>& histories);
AggregationResult foolsgold(const AggregationInput& input);

struct RflbatOptions {
  std::int64_t pca_dims = 2;
  std::int64_t clusters = 2;
  double eps1 = 10.0;
  double eps2 = 4.0;
};
AggregationResult rflbat(const AggregationInput& input, const RflbatOptions& options = {});

/// Single-linkage merge order on cosine distance; returns the members of
/// the first cluster that reaches min_size (ascending positions).
std::vector<std::size_t> flame_admitted(const std::vector<Eigen::VectorXd>& updates, std::size_t min_size);
AggregationResult flame(const AggregationInput& input, double noise_lambda);

struct DefenseSpec {
  std::string name = "fedavg";  // fedavg | multikrum | foolsgold | rflbat | flame
  bool uniform_weights = false;
  std::int64_t krum_f = 3;
  std::int64_t krum_m = 0;  // 0 means n - f
  RflbatOptions rflbat;
  double flame_lambda = 0.001;

  void validate() const;
};

/// Runs the configured rule. Multi-Krum's f is lowered to the largest value
/// the round's n admits (n >= 2f + 3) while m stays n - f_requested,
/// clamped to [1, n - f_used]; both are reported in diagnostics.
AggregationResult aggregate(const DefenseSpec& spec, const AggregationInput& input);

}  // namespace mbafl
