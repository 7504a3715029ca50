#include "mbafl/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "mbafl/errors.hpp"

namespace mbafl {

double fraction_equal(const torch::Tensor& predicted, const torch::Tensor& expected) {
  if (predicted.numel() == 0) throw MetricError("empty evaluation set");
  return predicted.eq(expected).sum().item<double>() / static_cast<double>(predicted.numel());
}

double accuracy(const Model& model, const Dataset& test_set) {
  if (test_set.empty()) throw MetricError("accuracy on an empty test set");
  return fraction_equal(model.predict(test_set.images).argmax(1), test_set.labels);
}

double asr(const Model& model, const Dataset& test_set, const Trigger& trigger, std::int64_t target_class) {
  const auto keep = test_set.labels.ne(target_class).nonzero().squeeze(1);
  if (keep.numel() == 0) throw MetricError("no non-target samples to measure ASR on");
  const auto x = apply_trigger(test_set.images.index_select(0, keep), trigger);
  const auto pred = model.predict(x).argmax(1);
  return pred.eq(target_class).sum().item<double>() / static_cast<double>(keep.numel());
}

double gap(const std::vector<double>& asrs) {
  if (asrs.empty()) throw MetricError("gap of an empty ASR list");
  const auto [lo, hi] = std::minmax_element(asrs.begin(), asrs.end());
  return *hi - *lo;
}

std::int64_t lifespan(const std::vector<double>& asr_series, double threshold) {
  std::int64_t n = 0;
  for (double a : asr_series) {
    if (a < threshold) break;
    ++n;
  }
  return n;
}

void RoundRecord::finalize() {
  if (asr.empty()) {
    asr_mean = 0.0;
    gap = 0.0;
    return;
  }
  asr_mean = std::accumulate(asr.begin(), asr.end(), 0.0) / static_cast<double>(asr.size());
  gap = mbafl::gap(asr);
}

nlohmann::ordered_json to_json(const RoundRecord& r) {
  nlohmann::ordered_json j;
  j["round"] = r.round;
  j["accuracy"] = r.accuracy;
  for (std::size_t i = 0; i < r.asr.size(); ++i) j["asr_" + std::to_string(i)] = r.asr[i];
  j["asr_mean"] = r.asr_mean;
  j["gap"] = r.gap;
  j["defense"] = r.defense;
  j["accepted_ids"] = r.accepted_ids;
  j["selected_ids"] = r.selected_ids;
  j["skipped"] = r.skipped;
  j["attack_active"] = r.attack_active;
  j["defense_diagnostics"] = r.defense_diagnostics;
  j["attackers"] = r.attacker_diagnostics;
  return j;
}

RoundRecord record_from_json(const nlohmann::json& j) {
  RoundRecord r;
  r.round = j.at("round").get<std::int64_t>();
  r.accuracy = j.at("accuracy").get<double>();
  for (std::size_t i = 0;; ++i) {
    const auto key = "asr_" + std::to_string(i);
    if (!j.contains(key)) break;
    r.asr.push_back(j.at(key).get<double>());
  }
  r.asr_mean = j.at("asr_mean").get<double>();
  r.gap = j.at("gap").get<double>();
  r.defense = j.at("defense").get<std::string>();
  r.accepted_ids = j.at("accepted_ids").get<std::vector<std::int64_t>>();
  r.selected_ids = j.value("selected_ids", std::vector<std::int64_t>{});
  r.skipped = j.value("skipped", false);
  r.attack_active = j.value("attack_active", false);
  r.defense_diagnostics = j.value("defense_diagnostics", nlohmann::json::object());
  r.attacker_diagnostics = j.value("attackers", nlohmann::json::array());
  for (double a : r.asr) {
    if (a < 0.0 || a > 1.0) throw ReportError("asr outside [0,1]");
  }
  if (r.accuracy < 0.0 || r.accuracy > 1.0) throw ReportError("accuracy outside [0,1]");
  return r;
}

std::vector<RoundRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open results file " + path.string());
  std::vector<RoundRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ReportError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ReportError& e) {
      throw ReportError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

EmbeddingTable export_embeddings(const Model& model, const Dataset& data, const EmbeddingRequest& request) {
  if (request.triggers.size() != request.targets.size()) throw ConfigError("one target per trigger expected");
  const auto labels = data.label_vector();
  std::vector<torch::Tensor> blocks;
  EmbeddingTable t;

  std::vector<std::int64_t> taken(static_cast<std::size_t>(data.num_classes), 0);
  std::vector<std::int64_t> clean;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& c = taken[static_cast<std::size_t>(labels[i])];
    if (c < request.per_class) {
      ++c;
      clean.push_back(static_cast<std::int64_t>(i));
    }
  }
  if (!clean.empty()) {
    blocks.push_back(model.extract_features(data.images.index_select(0, torch::tensor(clean, torch::kInt64))));
    for (auto i : clean) {
      t.label.push_back(labels[static_cast<std::size_t>(i)]);
      t.kind.emplace_back("clean");
    }
  }
  for (std::size_t a = 0; a < request.triggers.size(); ++a) {
    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < labels.size() && static_cast<std::int64_t>(rows.size()) < request.triggered; ++i) {
      if (labels[i] != request.targets[a]) rows.push_back(static_cast<std::int64_t>(i));
    }
    if (rows.empty()) continue;
    const auto x = apply_trigger(data.images.index_select(0, torch::tensor(rows, torch::kInt64)), request.triggers[a]);
    blocks.push_back(model.extract_features(x));
    for (auto i : rows) {
      t.label.push_back(labels[static_cast<std::size_t>(i)]);
      t.kind.push_back("attacker-" + std::to_string(a));
    }
  }
  if (blocks.empty()) {
    t.features.resize(0, model.feature_dim());
    return t;
  }
  const auto all = torch::cat(blocks).to(torch::kFloat64).contiguous();
  t.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      all.data_ptr<double>(), all.size(0), all.size(1));
  return t;
}

void write_embeddings_csv(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "kind,label";
  for (Eigen::Index k = 0; k < table.features.cols(); ++k) out << ",f" << k;
  out << "\n";
  out.precision(9);
  for (Eigen::Index i = 0; i < table.rows(); ++i) {
    out << table.kind[static_cast<std::size_t>(i)] << "," << table.label[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < table.features.cols(); ++k) out << "," << table.features(i, k);
    out << "\n";
  }
}

EmbeddingTable read_embeddings_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const auto dims = std::count(line.begin(), line.end(), ',') - 1;
  if (dims < 1 || line.rfind("kind,label", 0) != 0) throw ReportError(path.string() + ": not an embeddings table");
  EmbeddingTable t;
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    t.kind.push_back(cell);
    std::getline(ss, cell, ',');
    t.label.push_back(std::stoll(cell));
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<std::int64_t>(row.size()) != dims) {
      throw ReportError(path.string() + ":" + std::to_string(lineno) + ": wrong column count");
    }
    rows.push_back(std::move(row));
  }
  t.features.resize(static_cast<Eigen::Index>(rows.size()), dims);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Eigen::Index k = 0; k < dims; ++k) t.features(static_cast<Eigen::Index>(i), k) = rows[i][static_cast<std::size_t>(k)];
  }
  return t;
}

Projection project_2d(const EmbeddingTable& table) {
  const auto n = table.rows();
  if (n < 3) throw MetricError("project_2d needs at least 3 rows");
  const Eigen::RowVectorXd mean = table.features.colwise().mean();
  const Eigen::MatrixXd centered = table.features.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto d = cov.rows();
  Projection p;
  p.points = Eigen::MatrixXd::Zero(n, 2);
  const double top = eig.eigenvalues()(d - 1);
  const double tol = 1e-12 * std::max(1.0, std::abs(top));
  for (int k = 0; k < 2 && k < d; ++k) {
    const auto col = d - 1 - k;
    if (eig.eigenvalues()(col) <= tol) {
      p.rank_deficient = true;
      continue;
    }
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.points.col(k) = centered * v;
  }
  if (d < 2) p.rank_deficient = true;
  p.explained_variance = std::max(0.0, top);
  return p;
}

double id_mapping_margin(const Model& model, const Dataset& test_set, const Trigger& trigger,
                         std::int64_t target_class, std::int64_t max_samples) {
  const auto labels = test_set.label_vector();
  const auto k = test_set.num_classes;
  const auto feats = model.extract_features(test_set.images).to(torch::kFloat64);
  std::vector<torch::Tensor> centroids;
  for (std::int64_t c = 0; c < k; ++c) {
    const auto idx = test_set.labels.eq(c).nonzero().squeeze(1);
    if (idx.numel() == 0) throw MetricError("class " + std::to_string(c) + " missing from test set");
    centroids.push_back(feats.index_select(0, idx).mean(0));
  }
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < labels.size() && static_cast<std::int64_t>(rows.size()) < max_samples; ++i) {
    if (labels[i] != target_class) rows.push_back(static_cast<std::int64_t>(i));
  }
  if (rows.empty()) throw MetricError("no non-target samples for the ID-mapping margin");
  const auto x = apply_trigger(test_set.images.index_select(0, torch::tensor(rows, torch::kInt64)), trigger);
  const auto trig = model.extract_features(x).to(torch::kFloat64);
  const auto trig_n = trig / trig.norm(2, 1, true).clamp_min(1e-12);
  double to_target = 0.0, best_other = -2.0;
  for (std::int64_t c = 0; c < k; ++c) {
    const auto cen = centroids[static_cast<std::size_t>(c)];
    const double sim = trig_n.matmul(cen / cen.norm().clamp_min(1e-12)).mean().item<double>();
    if (c == target_class) {
      to_target = sim;
    } else {
      best_other = std::max(best_other, sim);
    }
  }
  return to_target - best_other;
}

RunSummary summarize(const std::vector<RoundRecord>& records, std::int64_t tail, std::int64_t window_end,
                     double threshold) {
  RunSummary s;
  std::vector<const RoundRecord*> usable;
  for (const auto& r : records) {
    if (!r.skipped) usable.push_back(&r);
  }
  if (usable.empty()) throw ReportError("no usable round records");
  const auto take = std::min<std::size_t>(usable.size(), static_cast<std::size_t>(std::max<std::int64_t>(1, tail)));
  s.tail_rounds = static_cast<std::int64_t>(take);
  const auto k = usable.back()->asr.size();
  s.asr.assign(k, 0.0);
  for (std::size_t i = usable.size() - take; i < usable.size(); ++i) {
    s.accuracy += usable[i]->accuracy;
    if (usable[i]->asr.size() != k) throw ReportError("records disagree on attacker count");
    for (std::size_t a = 0; a < k; ++a) s.asr[a] += usable[i]->asr[a];
  }
  s.accuracy /= static_cast<double>(take);
  for (auto& a : s.asr) a /= static_cast<double>(take);
  if (k > 0) {
    s.asr_mean = std::accumulate(s.asr.begin(), s.asr.end(), 0.0) / static_cast<double>(k);
    s.gap = gap(s.asr);
  }
  std::vector<double> series;
  for (const auto* r : usable) {
    if (r->round >= window_end) series.push_back(r->asr_mean);
  }
  s.lifespan = lifespan(series, threshold);
  s.asr_at_horizon = usable.back()->asr_mean;
  return s;
}

nlohmann::json to_json(const RunSummary& s) {
  return {{"tail_rounds", s.tail_rounds}, {"accuracy", s.accuracy}, {"asr", s.asr}, {"asr_mean", s.asr_mean},
          {"gap", s.gap}, {"lifespan", s.lifespan}, {"asr_at_horizon", s.asr_at_horizon}};
}

}  // namespace mbafl
