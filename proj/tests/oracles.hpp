#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance runner. None of these call into the library code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "mbafl/mirage.hpp"
#include "mbafl/model.hpp"
#include "mbafl/trigger.hpp"

namespace oracles {

using Vec = Eigen::VectorXd;

// Minimum over all (n-f-2)-subsets of the other updates of the summed
// squared distances; equals the Krum score by definition.
inline double brute_krum_score(const std::vector<Vec>& v, std::size_t i, std::size_t keep) {
  std::vector<std::size_t> others;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (j != i) others.push_back(j);
  }
  double best = std::numeric_limits<double>::infinity();
  const auto m = others.size();
  for (std::uint32_t mask = 0; mask < (1u << m); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != keep) continue;
    double s = 0.0;
    for (std::size_t b = 0; b < m; ++b) {
      if (mask & (1u << b)) s += (v[i] - v[others[b]]).squaredNorm();
    }
    best = std::min(best, s);
  }
  return best;
}

struct KrumInstance {
  std::vector<Vec> updates;
  std::int64_t f = 0;
  std::int64_t m = 1;
};

// n in [3, 7], f within the 2f+3 <= n bound, integer coordinates in R^5 so
// every distance sum is exact.
inline KrumInstance random_krum_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> coord(-6, 6);
  KrumInstance k;
  const auto n = std::uniform_int_distribution<std::size_t>(3, 7)(rng);
  k.f = std::uniform_int_distribution<std::int64_t>(0, static_cast<std::int64_t>((n - 3) / 2))(rng);
  k.m = std::uniform_int_distribution<std::int64_t>(1, static_cast<std::int64_t>(n) - k.f)(rng);
  k.updates.assign(n, Vec(5));
  for (auto& x : k.updates) {
    for (int c = 0; c < 5; ++c) x[c] = coord(rng);
  }
  return k;
}

struct KrumReference {
  std::vector<double> scores;
  std::vector<std::int64_t> chosen;  // ascending
  Vec mean;
};

inline KrumReference brute_multikrum(const KrumInstance& k) {
  const auto n = k.updates.size();
  KrumReference r;
  const auto keep = n - static_cast<std::size_t>(k.f) - 2;
  for (std::size_t i = 0; i < n; ++i) r.scores.push_back(brute_krum_score(k.updates, i, keep));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](auto a, auto b) { return r.scores[a] != r.scores[b] ? r.scores[a] < r.scores[b] : a < b; });
  r.chosen.assign(order.begin(), order.begin() + k.m);
  std::sort(r.chosen.begin(), r.chosen.end());
  r.mean = Vec::Zero(k.updates.front().size());
  for (auto i : r.chosen) r.mean += k.updates[static_cast<std::size_t>(i)];
  r.mean /= static_cast<double>(k.m);
  return r;
}

inline double cos_sim(const Vec& a, const Vec& b) {
  const double d = a.norm() * b.norm();
  return d == 0.0 ? 0.0 : a.dot(b) / d;
}

// FoolsGold as published: pairwise cosine, pardoning, 1 - max, rescale by
// the maximum, logit with confidence 1, clipped to [0, 1].
inline std::vector<double> foolsgold_reference(const std::vector<Vec>& h) {
  const auto n = h.size();
  Eigen::MatrixXd cs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) cs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cos_sim(h[i], h[j]);
    }
  }
  const Vec maxcs = cs.rowwise().maxCoeff();
  Eigen::MatrixXd pardoned = cs;
  for (Eigen::Index i = 0; i < cs.rows(); ++i) {
    for (Eigen::Index j = 0; j < cs.cols(); ++j) {
      if (i != j && maxcs(i) < maxcs(j)) pardoned(i, j) = cs(i, j) * maxcs(i) / maxcs(j);
    }
  }
  Vec wv = (1.0 - pardoned.rowwise().maxCoeff().array()).matrix();
  wv = wv.cwiseMax(0.0).cwiseMin(1.0);
  if (wv.maxCoeff() <= 0.0) return std::vector<double>(n, 0.0);
  wv /= wv.maxCoeff();
  std::vector<double> out;
  for (Eigen::Index i = 0; i < wv.size(); ++i) {
    double w = wv(i) == 1.0 ? 0.99 : wv(i);
    w = std::log(w / (1.0 - w)) + 0.5;
    if (std::isnan(w) || w < 0.0) w = 0.0;
    out.push_back(std::min(w, 1.0));
  }
  return out;
}

// Random histories; every third trial plants a near-copy pair.
inline std::vector<Vec> random_histories(std::mt19937_64& rng, int trial) {
  std::normal_distribution<double> g;
  const auto n = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
  std::vector<Vec> h(n, Vec(6));
  for (auto& x : h) {
    for (int k = 0; k < 6; ++k) x[k] = g(rng);
  }
  if (trial % 3 == 0 && n >= 3) h[1] = h[0] + 0.01 * h[2];
  return h;
}

// Agglomerative single linkage, merging the closest pair of clusters each
// step, until some cluster reaches min_size.
inline std::vector<std::size_t> naive_single_linkage(const std::vector<Vec>& v, std::size_t min_size) {
  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < v.size(); ++i) clusters.push_back({i});
  while (clusters.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t a = 0, b = 0;
    for (std::size_t x = 0; x < clusters.size(); ++x) {
      for (std::size_t y = x + 1; y < clusters.size(); ++y) {
        for (auto i : clusters[x]) {
          for (auto j : clusters[y]) {
            const double d = 1.0 - cos_sim(v[i], v[j]);
            if (d < best) {
              best = d;
              a = x;
              b = y;
            }
          }
        }
      }
    }
    clusters[a].insert(clusters[a].end(), clusters[b].begin(), clusters[b].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(b));
    if (clusters[a].size() >= min_size) {
      std::sort(clusters[a].begin(), clusters[a].end());
      return clusters[a];
    }
  }
  return {};
}

// FLAME without noise: admitted updates clipped to the median norm of all
// updates, then averaged.
inline Vec flame_clipped_mean(const std::vector<Vec>& v, const std::vector<std::size_t>& admitted) {
  std::vector<double> norms;
  for (const auto& x : v) norms.push_back(x.norm());
  auto sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  const double clip = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  Vec out = Vec::Zero(v.front().size());
  for (auto i : admitted) out += v[i] * std::min(1.0, clip / norms[i]);
  return out / static_cast<double>(admitted.size());
}

inline std::vector<Vec> random_flame_instance(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  const auto n = std::uniform_int_distribution<std::size_t>(3, 9)(rng);
  std::vector<Vec> v(n, Vec(4));
  for (auto& x : v) {
    for (int k = 0; k < 4; ++k) x[k] = g(rng);
  }
  return v;
}

// Largest relative error between the autograd gradient of the trigger
// objective and central differences on 16 random coordinates, computed in
// double with the detector cast to double.
inline double trigger_gradient_error(bool enhancement, std::uint64_t seed) {
  using namespace mbafl;
  ArchSpec spec;
  spec.num_classes = 10;
  spec.input_shape = {3, 16, 16};
  const auto model = build_model(spec, 21 + seed);
  auto det = build_detector(model, 3 + seed);
  det.body->to(torch::kFloat64);
  det.head->to(torch::kFloat64);
  torch::manual_seed(seed);
  const auto images = torch::rand({6, 3, 16, 16}, torch::kFloat64);
  auto trigger = init_trigger(TriggerKind::blend, {3, 16, 16}, 8 + seed, 0.3);
  // keep the pattern away from the pixel box edges
  const auto base = (0.1 + 0.8 * trigger.pattern.to(torch::kFloat64)).contiguous();
  MirageConfig cfg;
  cfg.target_class = 4;
  cfg.enhancement_enabled = enhancement;

  auto pattern = base.clone().requires_grad_(true);
  const auto terms = mirage_objective(det, images, trigger, pattern, cfg);
  const auto grad = torch::autograd::grad({terms.total}, {pattern})[0].contiguous();
  const double gmax = grad.abs().max().item<double>();
  if (!(gmax > 0.0)) return std::numeric_limits<double>::infinity();

  auto value_at = [&](const torch::Tensor& p) {
    torch::NoGradGuard guard;
    return mirage_objective(det, images, trigger, p, cfg).total.item<double>();
  };
  std::mt19937_64 rng(seed * 2 + (enhancement ? 1 : 0));
  std::uniform_int_distribution<std::int64_t> pick(0, base.numel() - 1);
  const double h = 1e-6;
  double worst = 0.0;
  for (int k = 0; k < 16; ++k) {
    const auto i = pick(rng);
    auto plus = base.clone(), minus = base.clone();
    plus.view(-1)[i] += h;
    minus.view(-1)[i] -= h;
    const double fd = (value_at(plus) - value_at(minus)) / (2 * h);
    const double g = grad.view(-1)[i].item<double>();
    // relative to the coordinate, floored at 1e-3 of the largest entry
    const double denom = std::max({std::abs(g), std::abs(fd), 1e-3 * gmax});
    worst = std::max(worst, std::abs(g - fd) / denom);
  }
  return worst;
}

// Consecutive leading entries at or above the threshold.
inline std::int64_t lifespan_reference(const std::vector<double>& s, double threshold) {
  std::int64_t n = 0;
  while (n < static_cast<std::int64_t>(s.size()) && s[static_cast<std::size_t>(n)] >= threshold) ++n;
  return n;
}

}  // namespace oracles
