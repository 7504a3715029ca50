#include "mbafl/engine.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "mbafl/errors.hpp"
#include "mbafl/rng.hpp"

namespace fs = std::filesystem;

namespace mbafl {

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'B', 'A', 'F', 'L', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr int kResultsVersion = 1;

ArchSpec arch_for(const ExperimentConfig& cfg, const Dataset& train) {
  ArchSpec spec;
  spec.arch = parse_arch(cfg.fl.arch);
  spec.num_classes = train.num_classes;
  spec.input_shape = train.image_shape();
  spec.normalization = dataset_normalization(cfg.data.dataset, spec.input_shape[0]);
  return spec;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::optional<std::size_t> attacker_index(const ExperimentConfig& cfg, std::int64_t client) {
  if (!cfg.attack_enabled()) return std::nullopt;
  const auto& ids = cfg.attack.client_ids;
  const auto it = std::find(ids.begin(), ids.end(), client);
  if (it == ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ids.begin());
}

}  // namespace

std::string code_version() {
#if defined(MBAFL_VERSION) && defined(MBAFL_GIT_DESCRIBE)
  return std::string(MBAFL_VERSION) + "+" + MBAFL_GIT_DESCRIBE;
#else
  return "unknown";
#endif
}

std::vector<std::int64_t> select_clients(std::uint64_t seed, std::int64_t round, std::int64_t n_clients,
                                         std::int64_t m) {
  if (m < 0 || m > n_clients) throw ConfigError("cannot select " + std::to_string(m) + " of " + std::to_string(n_clients) + " clients");
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n_clients));
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = make_rng(seed, Stream::selection, {static_cast<std::uint64_t>(round)});
  // partial Fisher-Yates: the first m slots are a uniform sample
  for (std::int64_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, n_clients - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  ids.resize(static_cast<std::size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

Environment prepare_environment(const ExperimentConfig& cfg) {
  return prepare_environment(
      cfg, load_dataset(cfg.data.dataset, resolve_data_root(cfg), {cfg.data.train_subset, cfg.data.test_subset}));
}

Environment prepare_environment(const ExperimentConfig& cfg, DatasetSplit data) {
  Environment env;
  env.data = std::move(data);
  env.partition = dirichlet_partition(env.data.train, cfg.data.clients, cfg.data.alpha,
                                      derive_seed(cfg.seed, Stream::partition));
  validate_partition(env.partition, env.data.train.size());
  for (const auto& idx : env.partition.client_indices) env.client_data.push_back(env.data.train.subset(idx));

  const auto test_labels = env.data.test.label_vector();
  for (std::size_t a = 0; a < cfg.attack.targets.size(); ++a) {
    const auto target = cfg.attack.targets[a];
    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < test_labels.size() && static_cast<std::int64_t>(rows.size()) < cfg.data.asr_subset; ++i) {
      if (test_labels[i] != target) rows.push_back(static_cast<std::int64_t>(i));
    }
    if (rows.empty()) throw MetricError("test set has no sample outside target class " + std::to_string(target));
    env.asr_sets.push_back(env.data.test.subset(rows));

    if (cfg.attack_enabled() && cfg.attack.spec.method == AttackMethod::mirage) {
      const auto client = cfg.attack.client_ids[a];
      const auto hist = env.client_data[static_cast<std::size_t>(client)].class_histogram();
      if (hist[static_cast<std::size_t>(target)] == 0) {
        throw AttackerSetupError("attacker " + std::to_string(a) + " (client " + std::to_string(client) +
                                 ") holds no sample of its target class " + std::to_string(target));
      }
    }
  }
  return env;
}

FLState initial_state(const ExperimentConfig& cfg, const Environment& env) {
  FLState s;
  s.global = build_model(arch_for(cfg, env.data.train), cfg.seed);
  const auto shape = env.data.train.image_shape();
  for (std::size_t a = 0; a < cfg.attack.targets.size(); ++a) {
    AttackerState st;
    st.attacker_id = static_cast<std::int64_t>(a);
    st.client_id = cfg.attack.client_ids[a];
    st.trigger = init_trigger(cfg.attack.trigger, shape, derive_seed(cfg.seed, Stream::trigger, {a}),
                              cfg.attack.blend, cfg.attack.patch);
    s.attackers.push_back(std::move(st));
  }
  return s;
}

bool should_evaluate(const ExperimentConfig& cfg, std::int64_t round) {
  if (round + 1 >= cfg.fl.attack_start || round + 1 == cfg.fl.rounds) return true;
  return (round + 1) % cfg.fl.eval_every == 0;
}

RoundRecord run_round(FLState& state, const ExperimentConfig& cfg, const Environment& env) {
  const auto t = state.round;
  RoundRecord rec;
  rec.round = t;
  rec.defense = cfg.defense.name;
  rec.selected_ids = select_clients(cfg.seed, t, cfg.data.clients, cfg.fl.clients_per_round);
  rec.attack_active = cfg.attack_enabled() && t >= cfg.fl.attack_start && t < cfg.window_end();

  const auto theta = to_vector(state.global);
  std::vector<ClientUpdate> updates;
  std::vector<std::pair<std::int64_t, std::size_t>> attackers_now;
  std::vector<double> benign_norms;
  for (auto id : rec.selected_ids) {
    const auto a = attacker_index(cfg, id);
    if (rec.attack_active && a) {
      attackers_now.emplace_back(id, *a);
      continue;
    }
    auto u = benign_round(state.global, env.client_data[static_cast<std::size_t>(id)], cfg.fl.local,
                          derive_seed(cfg.seed, Stream::training, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(id)}), id);
    benign_norms.push_back(u.delta.values.norm());
    updates.push_back(std::move(u));
  }
  if (t < cfg.fl.attack_start) {
    state.warmup_norms.insert(state.warmup_norms.end(), benign_norms.begin(), benign_norms.end());
  }

  for (const auto& [id, a] : attackers_now) {
    auto& att = state.attackers[a];
    const auto& data = env.client_data[static_cast<std::size_t>(id)];
    const auto seed = derive_seed(cfg.seed, Stream::training, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(id)});
    AttackSpec spec = cfg.attack.spec;
    spec.target_class = cfg.attack.targets[a];
    spec.mirage.target_class = spec.target_class;
    ClientUpdate u;
    switch (spec.method) {
      case AttackMethod::vanilla:
        u = vanilla_round(state.global, data, att.trigger, spec, seed, id);
        break;
      case AttackMethod::pgd: {
        double radius = spec.pgd_radius;
        if (radius <= 0.0) {
          radius = 3.0 * median_of(state.warmup_norms.empty() ? benign_norms : state.warmup_norms);
        }
        u = pgd_round(state.global, data, att.trigger, spec, radius, seed, id);
        break;
      }
      case AttackMethod::neurotoxin:
        u = neurotoxin_round(state.global, data, att.trigger, spec, seed, id);
        break;
      case AttackMethod::mirage:
        u = mirage_round(state.global, data, att, spec.mirage, seed);
        break;
    }
    u.diagnostics["attacker"] = a;
    u.diagnostics["client"] = id;
    u.diagnostics["method"] = to_string(spec.method);
    u.diagnostics["update_norm"] = u.delta.values.norm();
    rec.attacker_diagnostics.push_back(u.diagnostics);
    updates.push_back(std::move(u));
  }

  // The server sees ids, counts and deltas only.
  AggregationInput input;
  input.round = t;
  input.global = theta.values;
  input.seed = derive_seed(cfg.seed, Stream::noise, {static_cast<std::uint64_t>(t)});
  for (auto& u : updates) {
    if (cfg.defense.name == "foolsgold") {
      auto& h = state.history[u.client_id];
      if (h.size() == 0) h = Eigen::VectorXd::Zero(u.delta.size());
      h += u.delta.values;
      input.history[u.client_id] = h;
    }
    input.updates.push_back({u.client_id, std::move(u.delta.values), u.sample_count});
  }

  try {
    const auto result = aggregate(cfg.defense, input);
    from_vector(state.global, Eigen::VectorXd(theta.values - result.delta));
    rec.accepted_ids = result.accepted;
    rec.defense_diagnostics = result.diagnostics;
    rec.defense_diagnostics["weights"] = result.weights;
  } catch (const AggregationError& e) {
    rec.skipped = true;
    rec.defense_diagnostics = {{"error", e.what()}};
  }

  rec.evaluated = should_evaluate(cfg, t);
  if (rec.evaluated) {
    rec.accuracy = accuracy(state.global, env.data.test);
    for (std::size_t a = 0; a < state.attackers.size(); ++a) {
      rec.asr.push_back(asr(state.global, env.asr_sets[a], state.attackers[a].trigger, cfg.attack.targets[a]));
    }
    rec.finalize();
  }
  state.round = t + 1;
  return rec;
}

void save_checkpoint(const FLState& state, const ExperimentConfig& cfg, const fs::path& path) {
  nlohmann::json attackers = nlohmann::json::array();
  for (const auto& a : state.attackers) {
    const auto shape = a.trigger.shape();
    attackers.push_back({{"attacker_id", a.attacker_id},
                         {"client_id", a.client_id},
                         {"kind", to_string(a.trigger.kind)},
                         {"blend", a.trigger.blend_coefficient},
                         {"region", {a.trigger.region.row, a.trigger.region.col, a.trigger.region.height, a.trigger.region.width}},
                         {"shape", {shape[0], shape[1], shape[2]}},
                         {"head", a.head_weight.defined() ? a.head_weight.numel() : 0},
                         {"history", a.history}});
  }
  std::vector<std::int64_t> history_ids;
  for (const auto& [id, h] : state.history) history_ids.push_back(id);
  const auto v = to_vector(state.global);
  const nlohmann::json header = {{"round", state.round},
                                 {"config_hash", config_hash(cfg)},
                                 {"spec", arch_to_json(state.global.spec())},
                                 {"parameters", v.size()},
                                 {"attackers", attackers},
                                 {"warmup_norms", state.warmup_norms},
                                 {"history_ids", history_ids}};
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    detail::Writer w(tmp);
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.string(header.dump());
    w.bytes(v.values.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
    for (const auto& a : state.attackers) {
      const auto p = a.trigger.pattern.contiguous();
      w.bytes(p.data_ptr<float>(), static_cast<std::size_t>(p.numel()) * sizeof(float));
      if (a.head_weight.defined()) {
        const auto hw = a.head_weight.contiguous();
        const auto hb = a.head_bias.contiguous();
        w.bytes(hw.data_ptr<float>(), static_cast<std::size_t>(hw.numel()) * sizeof(float));
        w.bytes(hb.data_ptr<float>(), static_cast<std::size_t>(hb.numel()) * sizeof(float));
      }
    }
    for (const auto& [id, h] : state.history) w.bytes(h.data(), static_cast<std::size_t>(h.size()) * sizeof(double));
  }
  fs::rename(tmp, path);
}

FLState load_checkpoint(const fs::path& path, const ExperimentConfig& cfg, const Environment& env, bool strict) {
  try {
    detail::Reader r(detail::read_file(path), path.string());
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw ResumeError(path.string() + " is not a checkpoint");
    if (const auto version = r.pod<std::uint32_t>(); version != kCheckpointVersion) {
      throw ResumeError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                        std::to_string(kCheckpointVersion));
    }
    const auto header = nlohmann::json::parse(r.string());
    if (strict && header.at("config_hash").get<std::string>() != config_hash(cfg)) {
      throw ResumeError(path.string() + ": checkpoint belongs to config " + header.at("config_hash").get<std::string>() +
                        ", current config is " + config_hash(cfg));
    }
    FLState s = initial_state(cfg, env);
    if (arch_to_json(s.global.spec()) != header.at("spec")) throw ResumeError(path.string() + ": architecture differs");
    Eigen::VectorXd v(header.at("parameters").get<Eigen::Index>());
    if (v.size() != s.global.parameter_count()) throw ResumeError(path.string() + ": parameter count differs");
    r.bytes(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
    from_vector(s.global, v);
    s.round = header.at("round").get<std::int64_t>();
    s.warmup_norms = header.at("warmup_norms").get<std::vector<double>>();
    const auto& attackers = header.at("attackers");
    if (attackers.size() != s.attackers.size()) {
      if (strict) throw ResumeError(path.string() + ": attacker count differs");
      return s;
    }
    if (!strict) {
      // A warm start keeps the fresh attacker state unless the checkpoint
      // holds the same attackers, as when a run continues past its window.
      for (std::size_t a = 0; a < s.attackers.size(); ++a) {
        const auto& st = s.attackers[a];
        const auto shape = st.trigger.shape();
        if (attackers[a].at("client_id").get<std::int64_t>() != st.client_id ||
            attackers[a].at("kind").get<std::string>() != to_string(st.trigger.kind) ||
            attackers[a].at("shape") != nlohmann::json{shape[0], shape[1], shape[2]}) {
          return s;
        }
      }
    }
    for (std::size_t a = 0; a < s.attackers.size(); ++a) {
      auto& st = s.attackers[a];
      const auto& meta = attackers[a];
      r.bytes(st.trigger.pattern.data_ptr<float>(), static_cast<std::size_t>(st.trigger.pattern.numel()) * sizeof(float));
      const auto head = meta.at("head").get<std::int64_t>();
      if (head > 0) {
        st.head_weight = torch::empty({1, head});
        st.head_bias = torch::empty({1});
        r.bytes(st.head_weight.data_ptr<float>(), static_cast<std::size_t>(head) * sizeof(float));
        r.bytes(st.head_bias.data_ptr<float>(), sizeof(float));
      }
      if (strict) {
        for (const auto& h : meta.at("history")) st.history.push_back(h);
      }
    }
    if (!strict) return s;
    for (auto id : header.at("history_ids").get<std::vector<std::int64_t>>()) {
      Eigen::VectorXd h(v.size());
      r.bytes(h.data(), static_cast<std::size_t>(h.size()) * sizeof(double));
      s.history[id] = std::move(h);
    }
    if (!r.at_end()) throw ResumeError(path.string() + ": trailing bytes");
    return s;
  } catch (const IoError& e) {
    throw ResumeError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ResumeError(path.string() + ": malformed header: " + e.what());
  }
}

namespace {

fs::path checkpoint_path(const fs::path& dir, std::int64_t round) {
  char name[32];
  std::snprintf(name, sizeof name, "round-%06lld.ckpt", static_cast<long long>(round));
  return dir / "checkpoints" / name;
}

std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  const auto ckdir = dir / "checkpoints";
  if (!fs::exists(ckdir)) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(ckdir)) {
    if (e.path().extension() != ".ckpt") continue;
    if (!best || e.path().filename() > best->filename()) best = e.path();
  }
  return best;
}

void truncate_results(const fs::path& path, std::int64_t before_round) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    // a crash mid-write leaves a torn last line; everything after the
    // checkpoint is rerun anyway
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) break;
    if (j.at("round").get<std::int64_t>() < before_round) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  return run_experiment(cfg, prepare_environment(cfg), options);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Environment& env, const RunOptions& options) {
  validate(cfg);
  torch::set_num_threads(static_cast<int>(cfg.fl.threads));
  const fs::path dir = cfg.output.dir;
  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "triggers");
  const auto results_path = dir / "results.jsonl";

  ExperimentResult result;
  std::optional<fs::path> resume_from;
  if (options.resume) resume_from = latest_checkpoint(dir);
  if (resume_from) {
    result.state = load_checkpoint(*resume_from, cfg, env, true);
    truncate_results(results_path, result.state.round);
  } else {
    if (options.resume && fs::exists(results_path)) fs::remove(results_path);
    result.state = cfg.fl.init_checkpoint.empty() ? initial_state(cfg, env)
                                                  : load_checkpoint(cfg.fl.init_checkpoint, cfg, env, false);
    std::ofstream(results_path, std::ios::trunc);
  }

  {
    nlohmann::ordered_json manifest;
    manifest["format"] = kResultsVersion;
    manifest["config_hash"] = config_hash(cfg);
    manifest["seed"] = cfg.seed;
    manifest["code_version"] = code_version();
    manifest["dataset"] = cfg.data.dataset;
    manifest["rounds"] = cfg.fl.rounds;
    manifest["config"] = "config.yaml";
    manifest["results"] = "results.jsonl";
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    std::ofstream(dir / "config.yaml") << to_yaml(cfg);
  }

  std::ofstream results(results_path, std::ios::app);
  if (!results) throw IoError("cannot write " + results_path.string());
  auto& state = result.state;
  while (state.round < cfg.fl.rounds) {
    auto rec = run_round(state, cfg, env);
    if (rec.evaluated) {
      results << to_json(rec).dump() << "\n";
      results.flush();
    }
    if (options.on_round) options.on_round(rec);
    const bool periodic = cfg.output.checkpoint_every > 0 && state.round % cfg.output.checkpoint_every == 0;
    if (periodic || state.round == cfg.fl.attack_start || state.round == cfg.fl.rounds) {
      save_checkpoint(state, cfg, checkpoint_path(dir, state.round));
    }
  }
  results.close();

  result.records = read_records(results_path);
  if (!result.records.empty()) {
    result.summary = summarize(result.records, 10, cfg.window_end(), cfg.lifespan_threshold);
  }
  std::vector<Trigger> triggers;
  std::vector<std::int64_t> targets;
  for (std::size_t a = 0; a < state.attackers.size(); ++a) {
    const auto& att = state.attackers[a];
    save_trigger(att.trigger, dir / "triggers" / ("attacker-" + std::to_string(a) + ".trig"));
    result.id_margin.push_back(id_mapping_margin(state.global, env.data.test, att.trigger, cfg.attack.targets[a]));
    triggers.push_back(att.trigger);
    targets.push_back(cfg.attack.targets[a]);
  }
  if (cfg.output.embeddings) {
    EmbeddingRequest req;
    req.per_class = cfg.output.embeddings_per_class;
    req.triggers = triggers;
    req.targets = targets;
    write_embeddings_csv(export_embeddings(state.global, env.data.test, req), dir / "embeddings.csv");
  }
  nlohmann::ordered_json summary;
  summary["config_hash"] = config_hash(cfg);
  summary["final"] = result.records.empty() ? nlohmann::json(nullptr) : to_json(result.summary);
  summary["id_margin"] = result.id_margin;
  summary["targets"] = cfg.attack.targets;
  summary["method"] = cfg.attack.method;
  summary["defense"] = cfg.defense.name;
  std::ofstream(dir / "summary.json") << summary.dump(2) << "\n";
  return result;
}

}  // namespace mbafl
