#include "mbafl/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "binary_io.hpp"
#include "mbafl/errors.hpp"

namespace fs = std::filesystem;

namespace mbafl {

namespace {

// Walks one YAML mapping, remembers which keys were read and rejects the
// rest, so typos fail loudly with their full path.
class Section {
 public:
  Section(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ConfigError(where() + ": expected a mapping");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!node_ || !node_.IsMap()) return;
    const auto v = node_[key];
    if (!v || v.IsNull()) return;
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(join(key) + ": cannot read '" + dump(v) + "' as " + type_name<T>());
    }
  }

  Section sub(const std::string& key) {
    used_.insert(key);
    if (!node_ || !node_.IsMap()) return Section(YAML::Node(), join(key));
    return Section(node_[key], join(key));
  }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!used_.count(key)) throw ConfigError(join(key) + ": unknown key");
    }
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  static std::string dump(const YAML::Node& n) {
    YAML::Emitter e;
    e << YAML::Flow << n;
    return e.c_str();
  }

  template <class T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "a list";
  }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> used_;
};

YAML::Node merge(const YAML::Node& base, const YAML::Node& over) {
  if (!base || !base.IsMap() || !over.IsMap()) return YAML::Clone(over);
  YAML::Node out = YAML::Clone(base);
  for (const auto& kv : over) {
    const auto key = kv.first.as<std::string>();
    out[key] = (out[key] && out[key].IsMap() && kv.second.IsMap()) ? merge(out[key], kv.second) : YAML::Clone(kv.second);
  }
  return out;
}

YAML::Node load_with_includes(const YAML::Node& doc, const fs::path& base_dir, int depth) {
  if (depth > 8) throw ConfigError("include: nesting deeper than 8 levels");
  if (!doc.IsMap() || !doc["include"]) return doc;
  const auto rel = doc["include"].as<std::string>();
  const auto path = base_dir / rel;
  if (!fs::exists(path)) throw ConfigError("include: file not found: " + path.string());
  YAML::Node base;
  try {
    base = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("include: " + path.string() + ": " + e.what());
  }
  base = load_with_includes(base, path.parent_path(), depth + 1);
  YAML::Node own = YAML::Clone(doc);
  own.remove("include");
  return merge(base, own);
}

void set_path(YAML::Node node, const std::vector<std::string>& parts, std::size_t i, const YAML::Node& value) {
  if (i + 1 == parts.size()) {
    node[parts[i]] = value;
    return;
  }
  if (!node[parts[i]] || !node[parts[i]].IsMap()) node[parts[i]] = YAML::Node(YAML::NodeType::Map);
  set_path(node[parts[i]], parts, i + 1, value);
}

void apply_override(YAML::Node& root, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "': expected key=value");
  std::vector<std::string> parts;
  std::stringstream ss(text.substr(0, eq));
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("override '" + text + "': empty path component");
    parts.push_back(p);
  }
  YAML::Node value;
  try {
    value = YAML::Load(text.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError("override '" + text + "': " + e.what());
  }
  if (!root || !root.IsMap()) root = YAML::Node(YAML::NodeType::Map);
  set_path(root, parts, 0, value);
}

std::int64_t classes_of(const std::string& dataset) {
  if (dataset == "cifar100") return 100;
  if (dataset == "gtsrb") return 43;
  return 10;
}

ImageShape shape_of(const std::string& dataset) {
  if (dataset == "fashion-mnist") return {1, 28, 28};
  if (dataset == "synthetic") return {3, 16, 16};
  return {3, 32, 32};
}

ExperimentConfig from_yaml(const YAML::Node& root) {
  ExperimentConfig c;
  Section top(root, "");
  top.get("seed", c.seed);

  auto data = top.sub("data");
  data.get("dataset", c.data.dataset);
  data.get("root", c.data.root);
  data.get("train_subset", c.data.train_subset);
  data.get("test_subset", c.data.test_subset);
  data.get("asr_subset", c.data.asr_subset);
  data.get("alpha", c.data.alpha);
  data.get("clients", c.data.clients);
  data.finish();

  auto fl = top.sub("fl");
  fl.get("clients_per_round", c.fl.clients_per_round);
  fl.get("rounds", c.fl.rounds);
  fl.get("attack_start", c.fl.attack_start);
  fl.get("attack_window", c.fl.attack_window);
  fl.get("eval_every", c.fl.eval_every);
  fl.get("local_epochs", c.fl.local.epochs);
  fl.get("lr", c.fl.local.lr);
  fl.get("batch_size", c.fl.local.batch_size);
  fl.get("momentum", c.fl.local.momentum);
  fl.get("weight_decay", c.fl.local.weight_decay);
  fl.get("arch", c.fl.arch);
  fl.get("threads", c.fl.threads);
  fl.get("init_checkpoint", c.fl.init_checkpoint);
  fl.finish();

  auto at = top.sub("attack");
  at.get("method", c.attack.method);
  at.get("targets", c.attack.targets);
  at.get("client_ids", c.attack.client_ids);
  std::string trigger = to_string(c.attack.trigger);
  at.get("trigger", trigger);
  try {
    c.attack.trigger = parse_trigger_kind(trigger);
  } catch (const ConfigError& e) {
    throw ConfigError(at.join("trigger") + ": " + e.what());
  }
  at.get("blend", c.attack.blend);
  auto patch = at.sub("patch");
  patch.get("row", c.attack.patch.row);
  patch.get("col", c.attack.patch.col);
  patch.get("height", c.attack.patch.height);
  patch.get("width", c.attack.patch.width);
  patch.finish();
  auto& s = c.attack.spec;
  at.get("poison_fraction", s.poison_fraction);
  at.get("scale", s.scale);
  at.get("pgd_radius", s.pgd_radius);
  at.get("mask_ratio", s.mask_ratio);
  auto mi = at.sub("mirage");
  mi.get("adversarial_epochs", s.mirage.adversarial_epochs);
  mi.get("trigger_lr", s.mirage.trigger_lr);
  std::string step = to_string(s.mirage.step);
  mi.get("step", step);
  try {
    s.mirage.step = parse_step_rule(step);
  } catch (const ConfigError& e) {
    throw ConfigError(mi.join("step") + ": " + e.what());
  }
  mi.get("trigger_batch_size", s.mirage.trigger_batch_size);
  mi.get("enhancement", s.mirage.enhancement_enabled);
  mi.get("detector_weight", s.mirage.detector_weight);
  mi.get("ce_weight", s.mirage.ce_weight);
  mi.get("cs_weight", s.mirage.cs_weight);
  auto det = mi.sub("detector");
  det.get("epochs", s.mirage.detector.epochs);
  det.get("lr", s.mirage.detector.lr);
  det.get("batch_size", s.mirage.detector.batch_size);
  det.get("fine_tune", s.mirage.detector.fine_tune);
  det.finish();
  mi.finish();
  at.finish();

  auto de = top.sub("defense");
  de.get("name", c.defense.name);
  de.get("uniform_weights", c.defense.uniform_weights);
  de.get("krum_f", c.defense.krum_f);
  de.get("krum_m", c.defense.krum_m);
  de.get("flame_lambda", c.defense.flame_lambda);
  auto rf = de.sub("rflbat");
  rf.get("pca_dims", c.defense.rflbat.pca_dims);
  rf.get("clusters", c.defense.rflbat.clusters);
  rf.get("eps1", c.defense.rflbat.eps1);
  rf.get("eps2", c.defense.rflbat.eps2);
  rf.finish();
  de.finish();

  auto me = top.sub("metrics");
  me.get("lifespan_threshold", c.lifespan_threshold);
  me.finish();

  auto out = top.sub("output");
  out.get("dir", c.output.dir);
  out.get("checkpoint_every", c.output.checkpoint_every);
  out.get("embeddings", c.output.embeddings);
  out.get("embeddings_per_class", c.output.embeddings_per_class);
  out.finish();
  top.finish();

  if (c.attack.client_ids.empty()) {
    for (std::int64_t i = 0; i < c.attack.count(); ++i) c.attack.client_ids.push_back(i);
  }
  // attackers train locally exactly like benign clients
  s.local = c.fl.local;
  s.trigger_kind = c.attack.trigger;
  s.mirage.local = c.fl.local;
  s.mirage.poison_fraction = s.poison_fraction;
  if (c.attack.method != "none") {
    try {
      s.method = parse_attack_method(c.attack.method);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("attack.method: ") + e.what());
    }
  }
  validate(c);
  return c;
}

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); }

}  // namespace

void validate(const ExperimentConfig& c) {
  if (!is_known_dataset(c.data.dataset)) fail("data.dataset", "unknown dataset '" + c.data.dataset + "'");
  if (!(c.data.alpha > 0.0)) fail("data.alpha", "must be positive");
  if (c.data.clients < 1) fail("data.clients", "must be >= 1");
  if (c.data.train_subset < 0) fail("data.train_subset", "must be >= 0");
  if (c.data.test_subset < 0) fail("data.test_subset", "must be >= 0");
  if (c.data.asr_subset < 1) fail("data.asr_subset", "must be >= 1");

  if (c.fl.clients_per_round < 1 || c.fl.clients_per_round > c.data.clients) {
    fail("fl.clients_per_round", "must lie in [1, data.clients]");
  }
  if (c.fl.rounds < 0) fail("fl.rounds", "must be >= 0");
  if (c.fl.attack_start < 0) fail("fl.attack_start", "must be >= 0");
  if (c.fl.attack_window < 0) fail("fl.attack_window", "must be >= 0");
  if (c.fl.attack_start + c.fl.attack_window > c.fl.rounds) {
    fail("fl.attack_window", "window [" + std::to_string(c.fl.attack_start) + ", " +
                                 std::to_string(c.window_end()) + ") exceeds fl.rounds=" + std::to_string(c.fl.rounds));
  }
  if (c.fl.eval_every < 1) fail("fl.eval_every", "must be >= 1");
  if (c.fl.local.epochs < 0) fail("fl.local_epochs", "must be >= 0");
  if (c.fl.local.lr < 0.0) fail("fl.lr", "must be >= 0");
  if (c.fl.local.batch_size < 1) fail("fl.batch_size", "must be >= 1");
  if (c.fl.local.momentum < 0.0 || c.fl.local.momentum >= 1.0) fail("fl.momentum", "must lie in [0,1)");
  if (c.fl.local.weight_decay < 0.0) fail("fl.weight_decay", "must be >= 0");
  if (c.fl.threads < 1) fail("fl.threads", "must be >= 1");
  try {
    parse_arch(c.fl.arch);
  } catch (const ConfigError& e) {
    fail("fl.arch", e.what());
  }

  const auto& a = c.attack;
  if (a.method != "none" && a.method != "vanilla" && a.method != "pgd" && a.method != "neurotoxin" &&
      a.method != "mirage") {
    fail("attack.method", "unknown method '" + a.method + "'");
  }
  const auto classes = classes_of(c.data.dataset);
  std::set<std::int64_t> seen;
  for (auto t : a.targets) {
    if (t < 0 || t >= classes) fail("attack.targets", "target " + std::to_string(t) + " outside [0," + std::to_string(classes) + ")");
    if (!seen.insert(t).second) fail("attack.targets", "duplicate target " + std::to_string(t) + " (attackers need distinct targets)");
  }
  if (a.client_ids.size() != a.targets.size()) fail("attack.client_ids", "need one client id per target");
  std::set<std::int64_t> ids;
  for (auto id : a.client_ids) {
    if (id < 0 || id >= c.data.clients) fail("attack.client_ids", "client " + std::to_string(id) + " outside [0, data.clients)");
    if (!ids.insert(id).second) fail("attack.client_ids", "duplicate client " + std::to_string(id));
  }
  if (!(a.blend >= 0.0 && a.blend <= 1.0)) fail("attack.blend", "must lie in [0,1]");
  if (a.trigger == TriggerKind::patch) {
    const auto shape = shape_of(c.data.dataset);
    const auto& r = a.patch;
    if (r.row < 0 || r.col < 0 || r.height < 1 || r.width < 1 || r.row + r.height > shape[1] || r.col + r.width > shape[2]) {
      fail("attack.patch", "region exceeds the image bounds");
    }
  }
  if (!(a.spec.poison_fraction > 0.0 && a.spec.poison_fraction <= 1.0)) fail("attack.poison_fraction", "must lie in (0,1]");
  if (a.spec.mask_ratio < 0.0 || a.spec.mask_ratio >= 1.0) fail("attack.mask_ratio", "must lie in [0,1)");
  if (a.spec.pgd_radius < 0.0) fail("attack.pgd_radius", "must be >= 0 (0 = calibrate)");
  const auto& m = a.spec.mirage;
  if (m.adversarial_epochs < 0) fail("attack.mirage.adversarial_epochs", "must be >= 0");
  if (!(m.trigger_lr > 0.0)) fail("attack.mirage.trigger_lr", "must be positive");
  if (m.trigger_batch_size < 1) fail("attack.mirage.trigger_batch_size", "must be >= 1");
  if (m.detector.epochs < 0) fail("attack.mirage.detector.epochs", "must be >= 0");
  if (!(m.detector.lr > 0.0)) fail("attack.mirage.detector.lr", "must be positive");
  if (m.detector.batch_size < 1) fail("attack.mirage.detector.batch_size", "must be >= 1");

  try {
    c.defense.validate();
  } catch (const ConfigError& e) {
    fail("defense", e.what());
  }
  if (c.defense.name == "flame" && c.fl.clients_per_round < 3) fail("defense.name", "flame needs fl.clients_per_round >= 3");
  if (c.defense.name == "rflbat" && c.fl.clients_per_round < c.defense.rflbat.clusters) {
    fail("defense.rflbat.clusters", "exceeds fl.clients_per_round");
  }
  if (!(c.lifespan_threshold >= 0.0 && c.lifespan_threshold <= 1.0)) fail("metrics.lifespan_threshold", "must lie in [0,1]");
  if (c.output.checkpoint_every < 0) fail("output.checkpoint_every", "must be >= 0");
  if (c.output.embeddings_per_class < 1) fail("output.embeddings_per_class", "must be >= 1");
}

ExperimentConfig parse_config_text(const std::string& yaml, const std::vector<std::string>& overrides,
                                   const fs::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  root = load_with_includes(root, base_dir, 0);
  // grid axes belong to the recipe, not to any single run
  if (root.IsMap() && root["grid"]) root.remove("grid");
  for (const auto& o : overrides) apply_override(root, o);
  return from_yaml(root);
}

std::vector<GridCell> expand_grid(const fs::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  root = load_with_includes(root, path.parent_path(), 0);
  if (!root.IsMap() || !root["grid"]) return {};
  const auto grid = root["grid"];
  if (!grid.IsMap() || grid.size() == 0) throw ConfigError("grid: expected a non-empty mapping of key: [values]");
  std::vector<GridCell> cells{GridCell{}};
  for (const auto& axis : grid) {
    const auto key = axis.first.as<std::string>();
    if (!axis.second.IsSequence() || axis.second.size() == 0) {
      throw ConfigError("grid." + key + ": expected a non-empty list");
    }
    std::vector<GridCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : axis.second) {
        const auto value = v.as<std::string>();
        GridCell c = cell;
        c.name += (c.name.empty() ? "" : "-") + value;
        c.overrides.push_back(key + "=" + value);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

ExperimentConfig parse_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not readable: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides, path.parent_path());
}

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  const auto& s = c.attack.spec;
  const auto& m = s.mirage;
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["data"] = {{"dataset", c.data.dataset}, {"root", c.data.root}, {"train_subset", c.data.train_subset},
               {"test_subset", c.data.test_subset}, {"asr_subset", c.data.asr_subset}, {"alpha", c.data.alpha},
               {"clients", c.data.clients}};
  j["fl"] = {{"clients_per_round", c.fl.clients_per_round}, {"rounds", c.fl.rounds},
             {"attack_start", c.fl.attack_start}, {"attack_window", c.fl.attack_window},
             {"eval_every", c.fl.eval_every}, {"local_epochs", c.fl.local.epochs}, {"lr", c.fl.local.lr},
             {"batch_size", c.fl.local.batch_size}, {"momentum", c.fl.local.momentum},
             {"weight_decay", c.fl.local.weight_decay}, {"arch", c.fl.arch}, {"threads", c.fl.threads},
             {"init_checkpoint", c.fl.init_checkpoint}};
  j["attack"] = {{"method", c.attack.method},
                 {"targets", c.attack.targets},
                 {"client_ids", c.attack.client_ids},
                 {"trigger", to_string(c.attack.trigger)},
                 {"blend", c.attack.blend},
                 {"patch", {{"row", c.attack.patch.row}, {"col", c.attack.patch.col},
                            {"height", c.attack.patch.height}, {"width", c.attack.patch.width}}},
                 {"poison_fraction", s.poison_fraction},
                 {"scale", s.scale},
                 {"pgd_radius", s.pgd_radius},
                 {"mask_ratio", s.mask_ratio},
                 {"mirage", {{"adversarial_epochs", m.adversarial_epochs}, {"trigger_lr", m.trigger_lr},
                             {"step", to_string(m.step)}, {"trigger_batch_size", m.trigger_batch_size},
                             {"enhancement", m.enhancement_enabled}, {"detector_weight", m.detector_weight},
                             {"ce_weight", m.ce_weight}, {"cs_weight", m.cs_weight},
                             {"detector", {{"epochs", m.detector.epochs}, {"lr", m.detector.lr},
                                           {"batch_size", m.detector.batch_size},
                                           {"fine_tune", m.detector.fine_tune}}}}}};
  j["defense"] = {{"name", c.defense.name}, {"uniform_weights", c.defense.uniform_weights},
                  {"krum_f", c.defense.krum_f}, {"krum_m", c.defense.krum_m},
                  {"flame_lambda", c.defense.flame_lambda},
                  {"rflbat", {{"pca_dims", c.defense.rflbat.pca_dims}, {"clusters", c.defense.rflbat.clusters},
                              {"eps1", c.defense.rflbat.eps1}, {"eps2", c.defense.rflbat.eps2}}}};
  j["metrics"] = {{"lifespan_threshold", c.lifespan_threshold}};
  j["output"] = {{"dir", c.output.dir}, {"checkpoint_every", c.output.checkpoint_every},
                 {"embeddings", c.output.embeddings}, {"embeddings_per_class", c.output.embeddings_per_class}};
  return j;
}

// JSON is a subset of YAML, so the resolved config doubles as a config file.
std::string to_yaml(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("output");
  j["data"].erase("root");
  const auto text = j.dump();
  return detail::hex64(detail::fnv1a(text.data(), text.size()));
}

fs::path resolve_data_root(const ExperimentConfig& cfg) {
  if (!cfg.data.root.empty()) return cfg.data.root;
  if (const char* env = std::getenv("MBAFL_DATA_ROOT"); env && *env) return env;
  return "data";
}

}  // namespace mbafl
