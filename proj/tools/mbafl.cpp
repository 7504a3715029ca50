#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mbafl/config.hpp"
#include "mbafl/engine.hpp"
#include "mbafl/errors.hpp"
#include "mbafl/metrics.hpp"
#include "mbafl/plots.hpp"

namespace fs = std::filesystem;
using namespace mbafl;

namespace {

enum Exit { kOk = 0, kConfig = 2, kRuntime = 3, kIo = 4, kUsage = 64 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void print_progress(const RoundRecord& r) {
  if (!r.evaluated) return;
  std::fprintf(stderr, "round %4lld  acc %.4f", static_cast<long long>(r.round), r.accuracy);
  if (!r.asr.empty()) {
    std::fprintf(stderr, "  asr");
    for (double a : r.asr) std::fprintf(stderr, " %.4f", a);
    std::fprintf(stderr, "  gap %.4f", r.gap);
  }
  if (r.skipped) std::fprintf(stderr, "  (aggregation skipped)");
  std::fprintf(stderr, "%s\n", r.attack_active ? "  [attack]" : "");
}

void run_one(const ExperimentConfig& cfg, bool resume) {
  std::fprintf(stderr, "run %s -> %s (config %s)\n", cfg.attack.method.c_str(), cfg.output.dir.c_str(),
               config_hash(cfg).c_str());
  RunOptions opts;
  opts.resume = resume;
  opts.on_round = print_progress;
  const auto result = run_experiment(cfg, opts);
  const auto& s = result.summary;
  std::printf("%s: acc %.4f  mean ASR %.4f  GAP %.4f  lifespan %lld\n", cfg.output.dir.c_str(), s.accuracy,
              s.asr_mean, s.gap, static_cast<long long>(s.lifespan));
}

std::vector<std::string> base_overrides(const std::vector<std::string>& overrides, const std::optional<std::uint64_t>& seed,
                                        const std::string& out, const std::optional<std::int64_t>& rounds) {
  auto all = overrides;
  if (seed) all.push_back("seed=" + std::to_string(*seed));
  if (!out.empty()) all.push_back("output.dir=" + out);
  if (rounds) all.push_back("fl.rounds=" + std::to_string(*rounds));
  return all;
}

int cmd_run(const std::string& config, const std::vector<std::string>& overrides) {
  const auto cells = expand_grid(config);
  if (cells.empty()) {
    run_one(parse_config(config, overrides), false);
    return kOk;
  }
  // Grid recipes run their cells one after another into <output.dir>/<cell>.
  const auto root = parse_config(config, overrides);
  for (const auto& cell : cells) {
    auto o = cell.overrides;
    o.insert(o.end(), overrides.begin(), overrides.end());
    o.push_back("output.dir=" + (fs::path(root.output.dir) / cell.name).string());
    run_one(parse_config(config, o), false);
  }
  return kOk;
}

int cmd_resume(const std::string& out, const std::string& config, const std::vector<std::string>& overrides) {
  const fs::path dir = out;
  const fs::path cfg_path = config.empty() ? dir / "config.yaml" : fs::path(config);
  if (!fs::exists(cfg_path)) throw IoError("no config to resume from: " + cfg_path.string());
  auto o = overrides;
  o.push_back("output.dir=" + dir.string());
  run_one(parse_config(cfg_path, o), true);
  return kOk;
}

struct RunView {
  std::string label;
  std::string attack = "?";
  std::string defense = "?";
  RunSummary summary;
  std::size_t attackers = 0;
};

fs::path results_in(const fs::path& p) { return fs::is_directory(p) ? p / "results.jsonl" : p; }

std::vector<fs::path> collect_results(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p = in;
    if (!fs::exists(p)) throw IoError("no such file or directory: " + in);
    if (!fs::is_directory(p) || fs::exists(p / "results.jsonl")) {
      out.push_back(results_in(p));
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file() && e.path().filename() == "results.jsonl") found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    if (found.empty()) throw IoError("no results.jsonl under " + in);
    out.insert(out.end(), found.begin(), found.end());
  }
  return out;
}

RunView load_view(const fs::path& results, std::optional<double> threshold, std::int64_t tail) {
  RunView v;
  v.label = results.parent_path().string();
  const auto records = read_records(results);
  if (records.empty()) throw ReportError(results.string() + ": no records");
  std::int64_t window_end = records.front().round;
  double thr = 0.9;
  const auto cfg_path = results.parent_path() / "config.yaml";
  if (fs::exists(cfg_path)) {
    const auto cfg = parse_config(cfg_path);
    v.attack = cfg.attack.method;
    v.defense = cfg.defense.name;
    window_end = cfg.window_end();
    thr = cfg.lifespan_threshold;
  } else {
    v.defense = records.back().defense;
  }
  if (threshold) thr = *threshold;
  v.summary = summarize(records, tail, window_end, thr);
  v.attackers = records.back().asr.size();
  return v;
}

std::string pct(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * v);
  return buf;
}

int cmd_report(const std::vector<std::string>& inputs, std::optional<double> threshold, std::int64_t tail, bool as_json) {
  std::vector<RunView> views;
  for (const auto& r : collect_results(inputs)) views.push_back(load_view(r, threshold, tail));

  if (as_json) {
    for (const auto& v : views) {
      nlohmann::ordered_json j;
      j["run"] = v.label;
      j["attack"] = v.attack;
      j["defense"] = v.defense;
      j["summary"] = to_json(v.summary);
      std::cout << j.dump() << "\n";
    }
    return kOk;
  }

  std::printf("%-40s %-11s %-11s %7s %7s %7s %8s\n", "run", "attack", "defense", "Acc", "ASR", "GAP", "lifespan");
  for (const auto& v : views) {
    const auto& s = v.summary;
    std::printf("%-40s %-11s %-11s %7s %7s %7s %8lld\n", v.label.c_str(), v.attack.c_str(), v.defense.c_str(),
                pct(s.accuracy).c_str(), v.attackers ? pct(s.asr_mean).c_str() : "     -",
                v.attackers ? pct(s.gap).c_str() : "     -", static_cast<long long>(s.lifespan));
  }

  // attack x defense grid; cells show Acc / ASR / GAP
  std::vector<std::string> attacks, defenses;
  std::map<std::pair<std::string, std::string>, const RunView*> cell;
  for (const auto& v : views) {
    if (std::find(attacks.begin(), attacks.end(), v.attack) == attacks.end()) attacks.push_back(v.attack);
    if (std::find(defenses.begin(), defenses.end(), v.defense) == defenses.end()) defenses.push_back(v.defense);
    cell[{v.attack, v.defense}] = &v;
  }
  if (views.size() > 1) {
    std::printf("\n%-11s", "");
    for (const auto& d : defenses) std::printf(" | %-23s", d.c_str());
    std::printf("\n%-11s", "attack");
    for (std::size_t i = 0; i < defenses.size(); ++i) std::printf(" | %7s %7s %7s", "Acc", "ASR", "GAP");
    std::printf("\n");
    for (const auto& a : attacks) {
      std::printf("%-11s", a.c_str());
      for (const auto& d : defenses) {
        const auto it = cell.find({a, d});
        if (it == cell.end()) {
          std::printf(" | %23s", "");
          continue;
        }
        const auto& s = it->second->summary;
        const bool has = it->second->attackers > 0;
        std::printf(" | %7s %7s %7s", pct(s.accuracy).c_str(), has ? pct(s.asr_mean).c_str() : "     -",
                    has ? pct(s.gap).c_str() : "     -");
      }
      std::printf("\n");
    }
  }
  return kOk;
}

int cmd_plot(const std::string& input, const std::string& kind, const std::string& out) {
  const fs::path in = input;
  if (!fs::exists(in)) throw IoError("no such file or directory: " + input);
  const fs::path dir = fs::is_directory(in) ? in : in.parent_path();

  if (kind == "asr-curve") {
    const auto records = read_records(results_in(in));
    std::int64_t ws = 0, we = 0;
    if (fs::exists(dir / "config.yaml")) {
      const auto cfg = parse_config(dir / "config.yaml");
      ws = cfg.fl.attack_start;
      we = cfg.window_end();
    }
    const fs::path target = out.empty() ? dir / "asr-curve.svg" : fs::path(out);
    write_text(target, asr_curve_svg(records, ws, we));
    std::printf("%s\n", target.string().c_str());
  } else if (kind == "distribution-2d") {
    const fs::path csv = fs::is_directory(in) ? in / "embeddings.csv" : in;
    const auto table = read_embeddings_csv(csv);
    const fs::path target = out.empty() ? dir / "distribution-2d.svg" : fs::path(out);
    write_text(target, distribution_svg(table, project_2d(table)));
    std::printf("%s\n", target.string().c_str());
  } else if (kind == "trigger-gallery") {
    if (!fs::is_directory(in)) throw UsageError("trigger-gallery expects a run directory");
    const auto cfg = parse_config(dir / "config.yaml");
    const fs::path target = out.empty() ? dir / "gallery" : fs::path(out);
    fs::create_directories(target);
    auto data = load_dataset(cfg.data.dataset, resolve_data_root(cfg), {1, cfg.data.test_subset});
    const auto labels = data.test.label_vector();
    for (std::size_t a = 0; a < cfg.attack.targets.size(); ++a) {
      const auto trig_path = dir / "triggers" / ("attacker-" + std::to_string(a) + ".trig");
      const auto trigger = load_trigger(trig_path);
      const auto stem = "attacker-" + std::to_string(a);
      write_png(trigger.pattern * trigger.mask(), target / (stem + "-trigger.png"), 4);
      // first test image outside the attacker's target class
      std::size_t i = 0;
      while (i < labels.size() && labels[i] == cfg.attack.targets[a]) ++i;
      if (i == labels.size()) throw ReportError("no non-target test image for attacker " + std::to_string(a));
      const auto clean = data.test.images[static_cast<std::int64_t>(i)];
      write_png(clean, target / (stem + "-clean.png"), 4);
      write_png(apply_trigger(clean, trigger), target / (stem + "-triggered.png"), 4);
    }
    std::printf("%s\n", target.string().c_str());
  } else {
    throw UsageError("unknown plot kind '" + kind + "' (asr-curve, distribution-2d, trigger-gallery)");
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-label backdoor FL simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  std::string config, out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> rounds;

  auto* run = app.add_subcommand("run", "run an experiment (or every cell of a grid recipe)");
  run->add_option("-c,--config", config, "YAML config or recipe")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--override", overrides, "key.path=value, repeatable");
  run->add_option("--seed", seed, "master seed");
  run->add_option("--out", out, "output directory");
  run->add_option("--rounds", rounds, "shorthand for --override fl.rounds=N");

  auto* resume = app.add_subcommand("resume", "continue a run from its latest checkpoint");
  resume->add_option("--out", out, "run directory")->required();
  resume->add_option("-c,--config", config, "config (default: <out>/config.yaml)");
  resume->add_option("-o,--override", overrides, "key.path=value, repeatable");

  std::vector<std::string> inputs;
  std::optional<double> threshold;
  std::int64_t tail = 10;
  bool as_json = false;
  auto* report = app.add_subcommand("report", "summarize results into an attack x defense table");
  report->add_option("inputs", inputs, "run directories, results.jsonl files or grid roots")->required();
  report->add_option("--threshold", threshold, "lifespan ASR threshold")->check(CLI::Range(0.0, 1.0));
  report->add_option("--tail", tail, "rounds averaged for final metrics")->check(CLI::PositiveNumber);
  report->add_flag("--json", as_json, "one JSON object per run");

  std::string input, kind;
  auto* plot = app.add_subcommand("plot", "render asr-curve, distribution-2d or trigger-gallery");
  plot->add_option("input", input, "run directory, results.jsonl or embeddings.csv")->required();
  plot->add_option("-k,--kind", kind, "asr-curve | distribution-2d | trigger-gallery")->required();
  plot->add_option("--out", out, "output file (directory for trigger-gallery)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return cmd_run(config, base_overrides(overrides, seed, out, rounds));
    if (*resume) return cmd_resume(out, config, overrides);
    if (*report) return cmd_report(inputs, threshold, tail, as_json);
    if (*plot) return cmd_plot(input, kind, out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const IngestionError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
