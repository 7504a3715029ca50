#include "mbafl/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>

#include "mbafl/errors.hpp"

namespace mbafl {

namespace {

using Vec = Eigen::VectorXd;

// Updates in ascending client-id order; validates ids and lengths.
std::vector<const SubmittedUpdate*> ordered(const AggregationInput& input) {
  if (input.updates.empty()) throw AggregationError("no updates to aggregate");
  std::vector<const SubmittedUpdate*> out;
  for (const auto& u : input.updates) out.push_back(&u);
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i]->client_id == out[i - 1]->client_id) {
      throw AggregationError("client " + std::to_string(out[i]->client_id) + " submitted twice");
    }
  }
  const auto d = out.front()->delta.size();
  for (const auto* u : out) {
    if (u->delta.size() != d) throw ShapeError("updates differ in length");
    if (!u->delta.allFinite()) throw AggregationError("client " + std::to_string(u->client_id) + " sent a non-finite update");
  }
  return out;
}

AggregationResult weighted(const std::vector<const SubmittedUpdate*>& ups, const std::vector<double>& w) {
  AggregationResult r;
  r.weights = w;
  r.delta = Vec::Zero(ups.front()->delta.size());
  for (std::size_t i = 0; i < ups.size(); ++i) {
    if (w[i] > 0.0) {
      r.delta += w[i] * ups[i]->delta;
      r.accepted.push_back(ups[i]->client_id);
    }
  }
  return r;
}

AggregationResult mean_of(const std::vector<const SubmittedUpdate*>& ups, const std::vector<std::size_t>& chosen) {
  AggregationResult r;
  r.weights.assign(ups.size(), 0.0);
  r.delta = Vec::Zero(ups.front()->delta.size());
  for (auto i : chosen) r.delta += ups[i]->delta;
  r.delta /= static_cast<double>(chosen.size());
  for (auto i : chosen) {
    r.weights[i] = 1.0 / static_cast<double>(chosen.size());
    r.accepted.push_back(ups[i]->client_id);
  }
  std::sort(r.accepted.begin(), r.accepted.end());
  return r;
}

double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

nlohmann::json to_json(const AggregationInput& input) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& u : input.updates) {
    clients.push_back({{"id", u.client_id}, {"samples", u.sample_count}, {"norm", u.delta.norm()}});
  }
  return {{"round", input.round}, {"dimension", input.global.size()}, {"clients", clients},
          {"history_ids", [&] {
             std::vector<std::int64_t> ids;
             for (const auto& [id, h] : input.history) ids.push_back(id);
             return ids;
           }()}};
}

AggregationResult fedavg(const AggregationInput& input, bool uniform) {
  const auto ups = ordered(input);
  std::vector<double> w(ups.size());
  if (uniform) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(ups.size()));
  } else {
    double total = 0.0;
    for (const auto* u : ups) {
      if (u->sample_count <= 0) throw AggregationError("non-positive sample count");
      total += static_cast<double>(u->sample_count);
    }
    for (std::size_t i = 0; i < ups.size(); ++i) w[i] = static_cast<double>(ups[i]->sample_count) / total;
  }
  auto r = weighted(ups, w);
  r.diagnostics["rule"] = "fedavg";
  return r;
}

std::vector<double> krum_scores(const AggregationInput& input, std::int64_t f) {
  const auto ups = ordered(input);
  const auto n = static_cast<std::int64_t>(ups.size());
  const auto keep = n - f - 2;
  if (keep < 1) throw ConfigError("krum needs n - f - 2 >= 1");
  std::vector<std::vector<double>> d(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (std::size_t i = 0; i < ups.size(); ++i) {
    for (std::size_t j = i + 1; j < ups.size(); ++j) {
      d[i][j] = d[j][i] = (ups[i]->delta - ups[j]->delta).squaredNorm();
    }
  }
  std::vector<double> scores(ups.size());
  for (std::size_t i = 0; i < ups.size(); ++i) {
    std::vector<double> others;
    for (std::size_t j = 0; j < ups.size(); ++j) {
      if (j != i) others.push_back(d[i][j]);
    }
    std::sort(others.begin(), others.end());
    scores[i] = std::accumulate(others.begin(), others.begin() + keep, 0.0);
  }
  return scores;
}

AggregationResult multikrum(const AggregationInput& input, std::int64_t f, std::int64_t m) {
  const auto ups = ordered(input);
  const auto n = static_cast<std::int64_t>(ups.size());
  if (f < 0 || n < 2 * f + 3) {
    throw ConfigError("multikrum: n=" + std::to_string(n) + " does not satisfy n >= 2f+3 for f=" + std::to_string(f));
  }
  if (m < 1 || m > n - f) throw ConfigError("multikrum: m must lie in [1, n-f]");
  const auto scores = krum_scores(input, f);
  std::vector<std::size_t> order(ups.size());
  std::iota(order.begin(), order.end(), 0);
  // ids are ascending, so a stable sort breaks score ties by client id
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  order.resize(static_cast<std::size_t>(m));
  auto r = mean_of(ups, order);
  r.diagnostics = {{"rule", "multikrum"}, {"f", f}, {"m", m}, {"scores", scores}};
  return r;
}

std::vector<double> foolsgold_weights(const std::vector<Eigen::VectorXd>& histories) {
  const auto n = histories.size();
  std::vector<std::vector<double>> cs(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      cs[i][j] = (i == j) ? 0.0 : cosine(histories[i], histories[j]);
    }
  }
  std::vector<double> maxcs(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) maxcs[i] = *std::max_element(cs[i].begin(), cs[i].end());
  // pardoning: honest clients that merely resemble a sybil get relief
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && maxcs[i] < maxcs[j]) cs[i][j] *= maxcs[i] / maxcs[j];
    }
  }
  std::vector<double> wv(n);
  for (std::size_t i = 0; i < n; ++i) {
    wv[i] = std::clamp(1.0 - *std::max_element(cs[i].begin(), cs[i].end()), 0.0, 1.0);
  }
  const double top = *std::max_element(wv.begin(), wv.end());
  if (top <= 0.0) return std::vector<double>(n, 0.0);
  for (auto& w : wv) {
    w /= top;
    if (w == 1.0) w = 0.99;
    w = std::log(w / (1.0 - w)) + 0.5;
    if (std::isinf(w) && w > 0) w = 1.0;
    if (w > 1.0) w = 1.0;
    if (w < 0.0 || std::isnan(w)) w = 0.0;
  }
  return wv;
}

AggregationResult foolsgold(const AggregationInput& input) {
  const auto ups = ordered(input);
  std::vector<Vec> hist;
  for (const auto* u : ups) {
    const auto it = input.history.find(u->client_id);
    hist.push_back(it != input.history.end() ? it->second : u->delta);
  }
  const auto wv = foolsgold_weights(hist);
  const double total = std::accumulate(wv.begin(), wv.end(), 0.0);
  AggregationResult r;
  if (total <= 0.0) {
    r.weights.assign(ups.size(), 0.0);
    r.delta = Vec::Zero(ups.front()->delta.size());
    r.diagnostics = {{"rule", "foolsgold"}, {"raw_weights", wv}, {"all_zero", true}};
    return r;
  }
  std::vector<double> w(ups.size());
  for (std::size_t i = 0; i < ups.size(); ++i) w[i] = wv[i] / total;
  r = weighted(ups, w);
  r.diagnostics = {{"rule", "foolsgold"}, {"raw_weights", wv}};
  return r;
}

AggregationResult rflbat(const AggregationInput& input, const RflbatOptions& options) {
  const auto ups = ordered(input);
  const auto n = static_cast<std::int64_t>(ups.size());
  if (options.pca_dims < 1) throw ConfigError("rflbat: pca_dims must be >= 1");
  if (options.clusters < 1 || n < options.clusters) {
    throw ConfigError("rflbat: need n >= clusters (n=" + std::to_string(n) + ")");
  }

  // PCA through the n x n Gram matrix; the parameter dimension is far
  // larger than n.
  const auto d = ups.front()->delta.size();
  Vec mean = Vec::Zero(d);
  for (const auto* u : ups) mean += u->delta;
  mean /= static_cast<double>(n);
  Eigen::MatrixXd gram(n, n);
  std::vector<Vec> centered;
  for (const auto* u : ups) centered.push_back(u->delta - mean);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) gram(i, j) = gram(j, i) = centered[i].dot(centered[j]);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const Vec lambda = eig.eigenvalues();  // ascending
  const double scale = std::max(1e-300, lambda.cwiseAbs().maxCoeff());
  if (lambda(n - 1) <= 1e-12 * std::max(1.0, gram.trace()) || !std::isfinite(lambda(n - 1))) {
    auto r = fedavg(input);
    r.diagnostics = {{"rule", "rflbat"}, {"degenerate", true}};
    return r;
  }
  const auto dims = std::min<std::int64_t>(options.pca_dims, n);
  Eigen::MatrixXd y(n, dims);
  for (Eigen::Index k = 0; k < dims; ++k) {
    const auto col = n - 1 - k;
    Vec u = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    u.cwiseAbs().maxCoeff(&arg);
    if (u(arg) < 0) u = -u;
    const double l = lambda(col) > 1e-12 * scale ? lambda(col) : 0.0;
    y.col(k) = u * std::sqrt(l);
  }

  auto distance_sums = [&](const std::vector<std::size_t>& members) {
    std::vector<double> s;
    for (auto i : members) {
      double acc = 0.0;
      for (auto j : members) acc += (y.row(static_cast<Eigen::Index>(i)) - y.row(static_cast<Eigen::Index>(j))).norm();
      s.push_back(acc);
    }
    return s;
  };
  auto filter = [&](const std::vector<std::size_t>& members, double eps) {
    const auto s = distance_sums(members);
    const double med = median(s);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (med <= 0.0 || s[i] <= eps * med) kept.push_back(members[i]);
    }
    return kept;
  };

  std::vector<std::size_t> all(ups.size());
  std::iota(all.begin(), all.end(), 0);
  const auto stage1 = filter(all, options.eps1);

  // k-means with farthest-point seeding from the first kept update
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(options.clusters), stage1.size());
  std::vector<Eigen::RowVectorXd> centers{y.row(static_cast<Eigen::Index>(stage1.front()))};
  while (centers.size() < k) {
    double best = -1.0;
    std::size_t pick = stage1.front();
    for (auto i : stage1) {
      double nearest = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) nearest = std::min(nearest, (y.row(static_cast<Eigen::Index>(i)) - c).squaredNorm());
      if (nearest > best) {
        best = nearest;
        pick = i;
      }
    }
    centers.push_back(y.row(static_cast<Eigen::Index>(pick)));
  }
  std::vector<std::size_t> label(stage1.size(), 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t a = 0; a < stage1.size(); ++a) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < centers.size(); ++c) {
        const double dd = (y.row(static_cast<Eigen::Index>(stage1[a])) - centers[c]).squaredNorm();
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      if (iter == 0 || best != label[a]) changed = true;
      label[a] = best;
    }
    if (!changed) break;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(dims);
      int count = 0;
      for (std::size_t a = 0; a < stage1.size(); ++a) {
        if (label[a] == c) {
          sum += y.row(static_cast<Eigen::Index>(stage1[a]));
          ++count;
        }
      }
      if (count > 0) centers[c] = sum / count;
    }
  }

  // keep the cluster whose members are least alike in parameter space;
  // colluding or same-objective updates form the tight cluster
  std::vector<double> cluster_sim(centers.size(), std::numeric_limits<double>::infinity());
  std::size_t chosen = 0;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t a = 0; a < stage1.size(); ++a) {
      if (label[a] == c) members.push_back(stage1[a]);
    }
    if (members.empty()) continue;
    double acc = 0.0;
    for (auto i : members) {
      for (auto j : members) acc += (i == j) ? 1.0 : cosine(ups[i]->delta, ups[j]->delta);
    }
    cluster_sim[c] = acc / static_cast<double>(members.size() * members.size());
    if (cluster_sim[c] < cluster_sim[chosen]) chosen = c;
  }
  std::vector<std::size_t> members;
  for (std::size_t a = 0; a < stage1.size(); ++a) {
    if (label[a] == chosen) members.push_back(stage1[a]);
  }
  const auto accepted = filter(members, options.eps2);

  auto r = mean_of(ups, accepted);
  std::vector<double> sims;
  for (double s : cluster_sim) sims.push_back(std::isfinite(s) ? s : -1.0);
  std::vector<std::vector<double>> proj;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(dims));
    for (Eigen::Index k2 = 0; k2 < dims; ++k2) row[static_cast<std::size_t>(k2)] = y(i, k2);
    proj.push_back(row);
  }
  std::vector<std::int64_t> cluster_of(ups.size(), -1);
  for (std::size_t a = 0; a < stage1.size(); ++a) cluster_of[stage1[a]] = static_cast<std::int64_t>(label[a]);
  r.diagnostics = {{"rule", "rflbat"}, {"projection", proj}, {"clusters", cluster_of},
                   {"cluster_similarity", sims}, {"selected_cluster", chosen}};
  return r;
}

std::vector<std::size_t> flame_admitted(const std::vector<Eigen::VectorXd>& updates, std::size_t min_size) {
  const auto n = updates.size();
  if (n == 0 || n < min_size) return {};
  if (min_size <= 1) return {0};
  struct Edge {
    double d;
    std::size_t i, j;
  };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) edges.push_back({1.0 - cosine(updates[i], updates[j]), i, j});
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return a.d != b.d ? a.d < b.d : (a.i != b.i ? a.i < b.i : a.j < b.j);
  });
  std::vector<std::size_t> parent(n), size(n, 1);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& e : edges) {
    auto a = find(e.i), b = find(e.j);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    parent[b] = a;
    size[a] += size[b];
    if (size[a] >= min_size) {
      std::vector<std::size_t> members;
      for (std::size_t x = 0; x < n; ++x) {
        if (find(x) == a) members.push_back(x);
      }
      return members;
    }
  }
  return {};
}

AggregationResult flame(const AggregationInput& input, double noise_lambda) {
  const auto ups = ordered(input);
  const auto n = ups.size();
  if (n < 3) throw AggregationError("flame needs at least 3 updates, got " + std::to_string(n));
  if (noise_lambda < 0.0) throw ConfigError("flame: noise lambda must be >= 0");
  std::vector<Vec> deltas;
  std::vector<double> norms;
  for (const auto* u : ups) {
    deltas.push_back(u->delta);
    norms.push_back(u->delta.norm());
  }
  const auto min_size = static_cast<std::size_t>((n + 1) / 2 + 1);
  const auto admitted = flame_admitted(deltas, min_size);
  if (admitted.empty()) throw AggregationError("flame rejected every update");

  const double clip = median(norms);
  AggregationResult r;
  r.weights.assign(n, 0.0);
  r.delta = Vec::Zero(ups.front()->delta.size());
  for (auto i : admitted) {
    const double factor = (norms[i] > clip && norms[i] > 0.0) ? clip / norms[i] : 1.0;
    r.delta += factor * deltas[i];
    r.weights[i] = factor / static_cast<double>(admitted.size());
    r.accepted.push_back(ups[i]->client_id);
  }
  r.delta /= static_cast<double>(admitted.size());
  const double sigma = noise_lambda * clip;
  if (sigma > 0.0) {
    std::mt19937_64 rng(input.seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index i = 0; i < r.delta.size(); ++i) r.delta(i) += noise(rng);
  }
  r.diagnostics = {{"rule", "flame"}, {"min_cluster", min_size}, {"clip_bound", clip}, {"sigma", sigma}};
  return r;
}

void DefenseSpec::validate() const {
  if (name != "fedavg" && name != "multikrum" && name != "foolsgold" && name != "rflbat" && name != "flame") {
    throw ConfigError("unknown defense '" + name + "'");
  }
  if (krum_f < 0 || krum_m < 0) throw ConfigError("multikrum f and m must be >= 0");
  if (flame_lambda < 0.0) throw ConfigError("flame lambda must be >= 0");
  if (rflbat.pca_dims < 1 || rflbat.clusters < 1) throw ConfigError("invalid rflbat options");
}

AggregationResult aggregate(const DefenseSpec& spec, const AggregationInput& input) {
  if (spec.name == "fedavg") return fedavg(input, spec.uniform_weights);
  if (spec.name == "multikrum") {
    const auto n = static_cast<std::int64_t>(input.updates.size());
    const auto f_used = std::max<std::int64_t>(0, std::min(spec.krum_f, (n - 3) / 2));
    if (n < 3) {
      auto r = fedavg(input, true);
      r.diagnostics = {{"rule", "multikrum"}, {"fallback", "mean"}, {"n", n}};
      return r;
    }
    const auto m_req = spec.krum_m > 0 ? spec.krum_m : n - spec.krum_f;
    const auto m = std::clamp<std::int64_t>(m_req, 1, n - f_used);
    auto r = multikrum(input, f_used, m);
    r.diagnostics["f_requested"] = spec.krum_f;
    return r;
  }
  if (spec.name == "foolsgold") return foolsgold(input);
  if (spec.name == "rflbat") return rflbat(input, spec.rflbat);
  if (spec.name == "flame") return flame(input, spec.flame_lambda);
  throw ConfigError("unknown defense '" + spec.name + "'");
}

}  // namespace mbafl
