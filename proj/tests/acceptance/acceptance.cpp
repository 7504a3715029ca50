// Desk-scale acceptance runner. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Long runs are cached under --work and reused
// when the resolved config hash matches.

#include <chrono>
#include <functional>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "mbafl/config.hpp"
#include "mbafl/data.hpp"
#include "mbafl/defenses.hpp"
#include "mbafl/engine.hpp"
#include "mbafl/metrics.hpp"
#include "oracles.hpp"

using namespace mbafl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct RunResult {
  fs::path dir;
  ExperimentConfig cfg;
  RunSummary summary;
  std::vector<double> id_margin;
};

class Runner {
 public:
  Runner(fs::path recipes, fs::path work, bool fresh)
      : recipes_(std::move(recipes)), work_(std::move(work)), fresh_(fresh) {}

  const fs::path& work() const { return work_; }

  // Runs (or reuses) recipe + overrides into <work>/<label>.
  RunResult ensure(const std::string& label, const std::string& recipe, std::vector<std::string> overrides) {
    if (auto it = done_.find(label); it != done_.end()) return it->second;
    const auto dir = work_ / label;
    overrides.push_back("output.dir=" + dir.string());
    const auto cfg = parse_config(recipes_ / recipe, overrides);
    const auto hash = config_hash(cfg);

    bool reuse = false;
    if (!fresh_ && fs::exists(dir / "summary.json")) {
      std::ifstream in(dir / "summary.json");
      const auto j = nlohmann::json::parse(in, nullptr, false);
      reuse = !j.is_discarded() && j.value("config_hash", "") == hash;
    }
    if (!reuse) {
      std::fprintf(stderr, "[acceptance] running %s (%s)\n", label.c_str(), hash.c_str());
      RunOptions opts;
      const auto t0 = std::chrono::steady_clock::now();
      opts.on_round = [&](const RoundRecord& r) {
        if ((r.round + 1) % 10 != 0) return;
        const auto s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "[acceptance]   %s round %lld  acc %.3f  asr %.3f  (%.0fs)\n", label.c_str(),
                     static_cast<long long>(r.round), r.accuracy, r.asr_mean, s);
      };
      // a checkpoint for this exact config lets an interrupted run continue
      opts.resume = fs::exists(dir / "checkpoints") && !fresh_;
      run_experiment(cfg, opts);
    } else {
      std::fprintf(stderr, "[acceptance] reusing %s\n", label.c_str());
    }

    RunResult r;
    r.dir = dir;
    r.cfg = cfg;
    r.summary = summarize(read_records(dir / "results.jsonl"), 10, cfg.window_end(), cfg.lifespan_threshold);
    std::ifstream in(dir / "summary.json");
    r.id_margin = nlohmann::json::parse(in).at("id_margin").get<std::vector<double>>();
    done_[label] = r;
    return r;
  }

  fs::path checkpoint(const RunResult& run, std::int64_t round) const {
    char name[32];
    std::snprintf(name, sizeof name, "round-%06lld.ckpt", static_cast<long long>(round));
    return run.dir / "checkpoints" / name;
  }

 private:
  fs::path recipes_;
  fs::path work_;
  bool fresh_;
  std::map<std::string, RunResult> done_;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double min_of(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::min_element(v.begin(), v.end()); }

// The attack phase of every desk-scale run starts from the benign round-60
// model of the conflict run: all configs share seed, data and warmup, so
// re-running the 60 warmup rounds would produce the same model.
std::string warm_start(Runner& runner) {
  const auto base = runner.ensure("conflict", "conflict-demo.yaml", {});
  return "fl.init_checkpoint=" + runner.checkpoint(base, base.cfg.fl.attack_start).string();
}

Outcome criterion1(Runner& runner) {
  const auto r = runner.ensure("conflict", "conflict-demo.yaml", {});
  const auto& s = r.summary;
  const bool pass = s.gap >= 0.40 && min_of(s.asr) <= 0.30;
  return {pass, fmt("vanilla x2: GAP %.3f (need >= 0.40), ASR %.3f / %.3f, min %.3f (need <= 0.30)", s.gap, s.asr.at(0),
                    s.asr.at(1), min_of(s.asr))};
}

Outcome criterion2(Runner& runner) {
  const auto init = warm_start(runner);
  const auto m = runner.ensure("mirage", "mirage-default.yaml", {init});
  const auto c = runner.ensure("control", "mirage-default.yaml", {init, "attack.method=none"});
  const auto& s = m.summary;
  const double drop = c.summary.accuracy - s.accuracy;
  const bool pass = s.asr_mean >= 0.80 && s.gap <= 0.15 && std::abs(drop) <= 0.03;
  std::string per;
  for (double a : s.asr) per += fmt(" %.3f", a);
  return {pass, fmt("mirage x3: mean ASR %.3f (need >= 0.80), GAP %.3f (need <= 0.15), ASR%s; acc %.3f vs control %.3f "
                    "(|diff| %.3f, need <= 0.03)",
                    s.asr_mean, s.gap, per.c_str(), s.accuracy, c.summary.accuracy, std::abs(drop))};
}

Outcome criterion3(Runner& runner) {
  const auto init = warm_start(runner);
  const std::vector<std::string> mk = {init, "defense.name=multikrum", "defense.krum_f=3"};
  auto vo = mk;
  vo.push_back("attack.method=vanilla");
  const auto v = runner.ensure("multikrum-vanilla", "mirage-default.yaml", vo);
  const auto m = runner.ensure("multikrum-mirage", "mirage-default.yaml", mk);
  const bool pass = v.summary.asr_mean <= 0.10 && m.summary.asr_mean >= 0.60;
  return {pass, fmt("Multi-Krum f=3: vanilla mean ASR %.3f (need <= 0.10), mirage mean ASR %.3f (need >= 0.60)",
                    v.summary.asr_mean, m.summary.asr_mean)};
}

Outcome criterion4(Runner& runner) {
  const auto init = warm_start(runner);
  const auto mirage = runner.ensure("mirage", "mirage-default.yaml", {init});
  const auto conflict = runner.ensure("conflict", "conflict-demo.yaml", {});
  // the post-window phase is benign, so it continues from each run's
  // end-of-window model
  const auto end = mirage.cfg.window_end();
  const auto lm = runner.ensure("lifespan-mirage", "lifespan.yaml",
                                {"fl.init_checkpoint=" + runner.checkpoint(mirage, end).string()});
  const auto lv = runner.ensure("lifespan-vanilla", "lifespan.yaml",
                                {"fl.init_checkpoint=" + runner.checkpoint(conflict, end).string(),
                                 "attack.method=vanilla", "attack.targets=[0, 1]"});
  const bool pass = lm.summary.asr_mean >= 0.60 && lv.summary.asr_mean <= 0.30;
  return {pass, fmt("after %lld benign rounds: mirage mean ASR %.3f (need >= 0.60, lifespan %lld), vanilla %.3f "
                    "(need <= 0.30, lifespan %lld)",
                    static_cast<long long>(lm.cfg.fl.rounds - end), lm.summary.asr_mean,
                    static_cast<long long>(lm.summary.lifespan), lv.summary.asr_mean,
                    static_cast<long long>(lv.summary.lifespan))};
}

Outcome criterion5(Runner& runner) {
  const auto init = warm_start(runner);
  int ordered = 0;
  std::string detail;
  for (int seed : {1, 2, 3}) {
    const std::vector<std::string> base = {init, "seed=" + std::to_string(seed)};
    auto off_o = base;
    off_o.push_back("attack.mirage.enhancement=false");
    const auto on = seed == 1 ? runner.ensure("mirage", "mirage-default.yaml", {init})
                              : runner.ensure("ablation-on-s" + std::to_string(seed), "mirage-default.yaml", base);
    const auto off = runner.ensure("ablation-off-s" + std::to_string(seed), "mirage-default.yaml", off_o);
    const bool ok = off.summary.asr_mean < on.summary.asr_mean && mean(off.id_margin) < mean(on.id_margin);
    ordered += ok;
    detail += fmt(" seed %d: ASR %.3f > %.3f, margin %.3f > %.3f%s;", seed, on.summary.asr_mean, off.summary.asr_mean,
                  mean(on.id_margin), mean(off.id_margin), ok ? "" : " (not ordered)");
  }
  return {ordered == 3, fmt("enhancement on vs off, %d of 3 seeds ordered:", ordered) + detail};
}

AggregationInput make_input(const std::vector<Eigen::VectorXd>& deltas) {
  AggregationInput in;
  for (std::size_t i = 0; i < deltas.size(); ++i) in.updates.push_back({static_cast<std::int64_t>(i), deltas[i], 10});
  in.global = Eigen::VectorXd::Zero(deltas.front().size());
  return in;
}

Outcome criterion6() {
  std::mt19937_64 rng(20240601);
  int krum_bad = 0;
  for (int t = 0; t < 200; ++t) {
    const auto k = oracles::random_krum_instance(rng);
    const auto want = oracles::brute_multikrum(k);
    const auto in = make_input(k.updates);
    const auto got = multikrum(in, k.f, k.m);
    if (krum_scores(in, k.f) != want.scores || got.accepted != want.chosen || got.delta != want.mean) ++krum_bad;
  }
  double fg_err = 0.0, flame_err = 0.0;
  int flame_set_bad = 0;
  for (int t = 0; t < 200; ++t) {
    const auto h = oracles::random_histories(rng, t);
    const auto want = oracles::foolsgold_reference(h);
    const auto got = foolsgold_weights(h);
    for (std::size_t i = 0; i < h.size(); ++i) fg_err = std::max(fg_err, std::abs(got.at(i) - want[i]));

    const auto v = oracles::random_flame_instance(rng);
    const auto n = v.size();
    const auto admitted = oracles::naive_single_linkage(v, n / 2 + (n % 2) + 1);
    const auto r = flame(make_input(v), 0.0);
    std::vector<std::int64_t> ids(admitted.begin(), admitted.end());
    if (r.accepted != ids) ++flame_set_bad;
    flame_err = std::max(flame_err, (r.delta - oracles::flame_clipped_mean(v, admitted)).cwiseAbs().maxCoeff());
  }
  const bool pass = krum_bad == 0 && fg_err <= 1e-9 && flame_err <= 1e-9 && flame_set_bad == 0;
  return {pass, fmt("Multi-Krum %d/200 instances differ from brute force; Foolsgold max err %.2e; FLAME(lambda=0) "
                    "max err %.2e, %d admitted-set mismatches (tolerance 1e-9)",
                    krum_bad, fg_err, flame_err, flame_set_bad)};
}

Outcome criterion7() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (bool enhancement : {true, false}) worst = std::max(worst, oracles::trigger_gradient_error(enhancement, 0));
  const auto s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst <= 1e-3, fmt("max relative error %.2e over 2x16 coordinates (need <= 1e-3), %.1fs", worst, s)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion8(Runner& runner, bool with_runs) {
  std::vector<std::string> failures;
  const double g = gap({0.9901, 0.9863, 0.9877});
  if (std::abs(g - 0.0038) > 1e-12) failures.push_back(fmt("gap example %.6f", g));

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int antitone_bad = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(std::uniform_int_distribution<std::size_t>(0, 30)(rng));
    for (auto& x : s) x = u(rng) < 0.2 ? 1.0 : u(rng);
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    const auto la = lifespan(s, a), lb = lifespan(s, b);
    if (la < lb || la != oracles::lifespan_reference(s, a) || lb != oracles::lifespan_reference(s, b)) ++antitone_bad;
  }
  if (antitone_bad) failures.push_back(fmt("lifespan antitone violated in %d series", antitone_bad));

  int cover_bad = 0;
  for (int t = 0; t < 200; ++t) {
    const auto n = std::uniform_int_distribution<std::int64_t>(20, 400)(rng);
    const auto classes = std::uniform_int_distribution<std::int64_t>(2, 10)(rng);
    const auto clients = std::uniform_int_distribution<std::int64_t>(1, 20)(rng);
    const double alpha = std::pow(10.0, std::uniform_real_distribution<double>(-2.0, 2.0)(rng));
    std::vector<std::int64_t> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = std::uniform_int_distribution<std::int64_t>(0, classes - 1)(rng);
    Dataset d;
    d.name = "labels-only";
    d.num_classes = classes;
    d.images = torch::zeros({n, 1, 2, 2});
    d.labels = torch::tensor(labels, torch::kInt64);
    const auto p = dirichlet_partition(d, clients, alpha, rng());
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    bool ok = static_cast<std::int64_t>(p.client_indices.size()) == clients;
    for (const auto& c : p.client_indices) {
      ok = ok && !c.empty();
      for (auto i : c) {
        if (i < 0 || i >= n) ok = false;
        else ++seen[static_cast<std::size_t>(i)];
      }
    }
    ok = ok && std::all_of(seen.begin(), seen.end(), [](int k) { return k == 1; });
    cover_bad += !ok;
  }
  if (cover_bad) failures.push_back(fmt("Dirichlet cover violated in %d/200 configs", cover_bad));

  std::string det = "determinism not checked";
  if (with_runs) {
    const auto a = runner.ensure("conflict", "conflict-demo.yaml", {});
    const auto b = runner.ensure("conflict-repeat", "conflict-demo.yaml", {});
    const auto ra = slurp(a.dir / "results.jsonl"), rb = slurp(b.dir / "results.jsonl");
    const bool same = !ra.empty() && ra == rb;
    det = fmt("two full runs %s (%zu bytes)", same ? "byte-identical" : "DIFFER", ra.size());
    if (!same) failures.push_back("results files differ");
  } else {
    failures.push_back("determinism runs skipped");
  }
  std::string detail = fmt("gap example %.4f; 1000 lifespan series; 200 partitions; ", g) + det;
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale acceptance runner"};
  std::string recipes, work;
  std::vector<int> only;
  bool fresh = false;
  app.add_option("--recipes", recipes, "recipe directory")->required()->check(CLI::ExistingDirectory);
  app.add_option("--work", work, "directory for cached runs")->required();
  app.add_option("--only", only, "criteria to evaluate (default all)")->delimiter(',');
  app.add_flag("--fresh", fresh, "ignore cached runs");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  Runner runner(recipes, fs::absolute(work), fresh);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  using Check = std::function<Outcome()>;
  const std::vector<std::pair<int, Check>> checks = {
      {6, [] { return criterion6(); }},
      {7, [] { return criterion7(); }},
      {1, [&] { return criterion1(runner); }},
      {8, [&] { return criterion8(runner, true); }},
      {2, [&] { return criterion2(runner); }},
      {3, [&] { return criterion3(runner); }},
      {5, [&] { return criterion5(runner); }},
      {4, [&] { return criterion4(runner); }},
  };
  std::map<int, Outcome> results;
  for (const auto& [id, check] : checks) {
    if (!wanted(id)) continue;
    try {
      results[id] = check();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("error: ") + e.what()};
    }
    // print as soon as known; the summary below repeats them in order
    std::fprintf(stderr, "[acceptance] criterion %d: %s\n", id, results[id].pass ? "PASS" : "FAIL");
  }

  bool all = true;
  for (const auto& [id, r] : results) {
    std::printf("%s criterion %d: %s\n", r.pass ? "PASS" : "FAIL", id, r.detail.c_str());
    all = all && r.pass;
  }
  std::fflush(stdout);
  return all ? 0 : 1;
}
