#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mbafl/defenses.hpp"
#include "mbafl/errors.hpp"
#include "oracles.hpp"

using namespace mbafl;
using Vec = Eigen::VectorXd;
using namespace oracles;

namespace {

AggregationInput make_input(const std::vector<Vec>& deltas, std::vector<std::int64_t> counts = {}) {
  AggregationInput in;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    in.updates.push_back({static_cast<std::int64_t>(i), deltas[i], counts.empty() ? 10 : counts[i]});
  }
  in.global = Vec::Zero(deltas.front().size());
  return in;
}

}  // namespace

TEST_CASE("Multi-Krum matches brute-force scores and selection on 200 random instances") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = random_krum_instance(rng);
    const auto in = make_input(k.updates);
    const auto want = brute_multikrum(k);
    CHECK(krum_scores(in, k.f) == want.scores);
    const auto r = multikrum(in, k.f, k.m);
    CHECK(r.accepted == want.chosen);
    CHECK(r.delta == want.mean);
  }
}

TEST_CASE("Multi-Krum preconditions and the adapter's clamping") {
  std::vector<Vec> v(5, Vec::Zero(3));
  for (int i = 0; i < 5; ++i) v[static_cast<std::size_t>(i)][0] = i;
  const auto in = make_input(v);
  CHECK_THROWS_AS(multikrum(in, 2, 1), ConfigError);  // 5 < 2*2+3
  CHECK_THROWS_AS(multikrum(in, 1, 5), ConfigError);  // m > n - f

  DefenseSpec spec;
  spec.name = "multikrum";
  spec.krum_f = 3;
  const auto r = aggregate(spec, in);
  CHECK(r.diagnostics["f"] == 1);
  CHECK(r.diagnostics["m"] == 2);
  CHECK(r.diagnostics["f_requested"] == 3);
  CHECK(r.accepted.size() == 2);

  const auto two = make_input({Vec::Ones(3), Vec::Zero(3)});
  const auto fallback = aggregate(spec, two);
  CHECK(fallback.delta == Vec::Constant(3, 0.5));
}

TEST_CASE("Multi-Krum drops a far outlier") {
  std::vector<Vec> v;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 0.1);
  for (int i = 0; i < 6; ++i) {
    Vec x(4);
    for (int k = 0; k < 4; ++k) x[k] = 1.0 + g(rng);
    v.push_back(x);
  }
  v.push_back(Vec::Constant(4, 50.0));
  const auto r = multikrum(make_input(v), 1, 5);
  CHECK(std::find(r.accepted.begin(), r.accepted.end(), 6) == r.accepted.end());
}

TEST_CASE("Foolsgold weights match the direct formula to 1e-9") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto h = random_histories(rng, trial);
    const auto want = foolsgold_reference(h);
    const auto got = foolsgold_weights(h);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-9).scale(1e-9));
  }
}

TEST_CASE("Foolsgold zeroes identical sybils and normalizes the rest") {
  Vec a(3), b(3), c(3);
  a << 1, 0, 0;
  b << 0, 1, 0;
  c << 0, 0, 1;
  const Vec s = Vec::Constant(3, 1.0);
  auto in = make_input({a, b, c, s, s});
  for (const auto& u : in.updates) in.history[u.client_id] = u.delta;
  const auto r = foolsgold(in);
  CHECK(r.weights[3] == 0.0);
  CHECK(r.weights[4] == 0.0);
  CHECK(std::accumulate(r.weights.begin(), r.weights.end(), 0.0) == doctest::Approx(1.0));
  CHECK(r.accepted == std::vector<std::int64_t>{0, 1, 2});
}

TEST_CASE("FLAME admission equals naive single linkage; lambda 0 is the clipped mean") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = random_flame_instance(rng);
    const auto n = v.size();
    const auto min_size = n / 2 + (n % 2) + 1;
    const auto admitted = naive_single_linkage(v, min_size);
    CHECK(flame_admitted(v, min_size) == admitted);
    const auto r = flame(make_input(v), 0.0);
    CHECK((r.delta - flame_clipped_mean(v, admitted)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("FLAME with lambda 0 is the clipped mean of the admitted cluster") {
  // five updates pointing roughly along e1 with different norms, two
  // pointing the other way
  std::vector<Vec> v;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 0.05);
  for (double scale : {1.0, 2.0, 3.0, 8.0, 0.5}) {
    Vec x(3);
    x << 1.0 + g(rng), g(rng), g(rng);
    v.push_back(scale * x);
  }
  for (double scale : {4.0, 6.0}) {
    Vec x(3);
    x << -1.0 + g(rng), 1.0 + g(rng), g(rng);
    v.push_back(scale * x);
  }
  const auto in = make_input(v);
  const auto r = flame(in, 0.0);
  CHECK(r.accepted == std::vector<std::int64_t>{0, 1, 2, 3, 4});  // ceil(7/2)+1 = 5

  std::vector<double> norms;
  for (const auto& x : v) norms.push_back(x.norm());
  std::vector<double> sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  const double clip = sorted[3];
  Vec want = Vec::Zero(3);
  for (int i = 0; i < 5; ++i) want += v[static_cast<std::size_t>(i)] * std::min(1.0, clip / norms[static_cast<std::size_t>(i)]);
  want /= 5.0;
  CHECK((r.delta - want).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(r.diagnostics["clip_bound"].get<double>() == doctest::Approx(clip).epsilon(1e-12));
}

TEST_CASE("FLAME noise has standard deviation lambda times the clip bound") {
  std::vector<Vec> v;
  for (int i = 0; i < 5; ++i) v.push_back(Vec::Constant(20000, 1.0 + 0.1 * i));
  auto in = make_input(v);
  in.seed = 123;
  const auto clean = flame(in, 0.0).delta;
  const auto noisy = flame(in, 0.01).delta;
  const Vec diff = noisy - clean;
  const double sd = std::sqrt(diff.squaredNorm() / static_cast<double>(diff.size()));
  const double clip = Vec::Constant(20000, 1.2).norm();
  CHECK(sd == doctest::Approx(0.01 * clip).epsilon(0.03));
  CHECK(flame(in, 0.01).delta == noisy);  // seeded
  in.seed = 124;
  CHECK(flame(in, 0.01).delta != noisy);
}

TEST_CASE("RFLBAT rejects a tight group of large identical-objective updates") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g;
  std::vector<Vec> v;
  for (int i = 0; i < 7; ++i) {
    Vec x(50);
    for (int k = 0; k < 50; ++k) x[k] = g(rng);
    v.push_back(x);
  }
  Vec bad(50);
  for (int k = 0; k < 50; ++k) bad[k] = 3.0 * g(rng);
  for (int i = 0; i < 3; ++i) {
    Vec x = bad;
    for (int k = 0; k < 50; ++k) x[k] += 0.05 * g(rng);
    v.push_back(x);
  }
  const auto r = rflbat(make_input(v));
  for (std::int64_t id : {7, 8, 9}) CHECK(std::find(r.accepted.begin(), r.accepted.end(), id) == r.accepted.end());
  CHECK_FALSE(r.accepted.empty());

  // identical updates give a zero spectrum; fall back to averaging
  const auto same = rflbat(make_input({Vec::Ones(4), Vec::Ones(4), Vec::Ones(4)}));
  CHECK(same.diagnostics["degenerate"] == true);
  CHECK(same.delta == Vec::Ones(4));
}

TEST_CASE("FedAvg weights by sample count, or uniformly") {
  Vec a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  const auto in = make_input({a, b}, {30, 10});
  const auto r = fedavg(in);
  CHECK(r.delta[0] == doctest::Approx(0.75));
  CHECK(r.delta[1] == doctest::Approx(0.25));
  CHECK(fedavg(in, true).delta == Vec::Constant(2, 0.5));
}

TEST_CASE("malformed rounds are aggregation errors") {
  AggregationInput empty;
  CHECK_THROWS_AS(fedavg(empty), AggregationError);
  auto dup = make_input({Vec::Ones(2), Vec::Ones(2)});
  dup.updates[1].client_id = 0;
  CHECK_THROWS_AS(fedavg(dup), AggregationError);
  auto nan = make_input({Vec::Ones(2), Vec::Constant(2, std::nan(""))});
  CHECK_THROWS_AS(fedavg(nan), AggregationError);
  CHECK_THROWS_AS(flame(make_input({Vec::Ones(2), Vec::Ones(2)}), 0.0), AggregationError);
  DefenseSpec bad;
  bad.name = "median";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("the audit view carries no role information") {
  const auto j = to_json(make_input({Vec::Ones(2), Vec::Zero(2)}));
  for (const auto& c : j["clients"]) {
    CHECK(c.size() == 3);
    CHECK(c.contains("id"));
    CHECK(c.contains("samples"));
    CHECK(c.contains("norm"));
  }
}
