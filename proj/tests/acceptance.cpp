// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.
//
// The training criteria (4, 5) take most of the time; set SPARSEPOOL_THREADS
// to spread the grid over cores.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "sparsepool/sparsepool.hpp"

using namespace sparsepool;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Run {
  int code = -1;
  std::string out;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(SPARSEPOOL_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), p)) r.out += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = run_gradcheck({});
  const double secs = seconds_since(t0);
  const auto j = rep.to_json();
  bool enough = rep.ops() == gradcheck_operators();
  double worst = 0.0;
  for (const auto& [op, s] : j["operators"].items()) {
    enough = enough && s["trials"].get<std::size_t>() >= 20;
    worst = std::max(worst, s["max_rel_error"].get<double>());
  }
  return {rep.passed() && enough && secs < 120.0,
          fmt("%zu operators, %zu cases, max rel err %.2e, %.1fs", rep.ops().size(),
              rep.cases.size(), worst, secs)};
}

Outcome degeneracies() {
  std::mt19937_64 rng(11);
  double dyn_avg = 0.0, constant = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Shape4 s{1 + rng() % 4, 1 + rng() % 8, 1 + rng() % 12, 1 + rng() % 12};
    const auto x = oracle::random_tensor(s, rng());
    const auto total = 1 + static_cast<int>(rng() % 30);
    const auto a = pool_forward(x, PoolMode::dynamic(), Schedule{0, total}).features;
    const auto b = pool_forward(x, PoolMode::average()).features;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dyn_avg = std::max(dyn_avg, std::abs(a.data()[i] - b.data()[i]));
    }
    Tensor4<double> c(s);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t ch = 0; ch < s.c; ++ch) {
        const double v = std::uniform_real_distribution<double>(-5, 5)(rng);
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t i = 0; i < s.w; ++i) c(n, ch, y, i) = v;
      }
    const auto o = pool_forward(c, PoolMode::outlier()).features;
    const auto av = pool_forward(c, PoolMode::average()).features;
    const auto mx = pool_forward(c, PoolMode::max()).features;
    for (std::size_t i = 0; i < o.size(); ++i) {
      constant = std::max({constant, std::abs(o.data()[i] - av.data()[i]),
                           std::abs(o.data()[i] - mx.data()[i])});
    }
  }
  const auto w0 = schedule_weights(0, 20), wE = schedule_weights(20, 20);
  const bool endpoints = w0.w1 == 1.0 && w0.w2 == 1.0 && wE.w1 == 2.0 && wE.w2 == 0.0;

  // 1000 channels of 1 x 1000 x 5 x 5.
  auto x = oracle::random_tensor(Shape4{1, 1000, 5, 5}, 5, 0.0, 1.0);
  for (std::size_t c = 0; c < 1000; ++c) x(0, c, c % 5, (c / 5) % 5) += 10.0;
  const auto av = pool_forward(x, PoolMode::average()).features;
  const auto mx = pool_forward(x, PoolMode::max()).features;
  const auto ol = pool_forward(x, PoolMode::outlier());
  std::size_t checked = 0, violations = 0;
  for (std::size_t c = 0; c < 1000; ++c) {
    if (ol.ctx.fallback[c]) continue;
    const auto v = oracle::channel(x, 0, c);
    const double mn = *std::min_element(v.begin(), v.end());
    ++checked;
    violations += !(mn <= av(0, c) && av(0, c) <= ol.features(0, c) &&
                    ol.features(0, c) <= mx(0, c));
  }
  const bool pass = dyn_avg <= 1e-12 && constant <= 1e-12 && endpoints && violations == 0 &&
                    checked == 1000;
  return {pass, fmt("dyn@0-avg %.1e, constant %.1e, endpoints %s, ordering %zu/%zu channels",
                    dyn_avg, constant, endpoints ? "exact" : "wrong", checked - violations,
                    checked)};
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(21);
  double worst = 0.0, worst_cc = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    const Shape4 s{1 + rng() % 4, 1 + rng() % 16, 1 + rng() % 16, 1 + rng() % 16};
    auto x = oracle::random_tensor(s, rng());
    for (auto& v : x.data()) {
      if (rng() % 20 == 0) v += 5.0;
    }
    const double lambda = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    const int total = 1 + static_cast<int>(rng() % 20);
    const int epoch = static_cast<int>(rng() % (total + 1));
    const auto avg = pool_forward(x, PoolMode::average()).features;
    const auto mx = pool_forward(x, PoolMode::max()).features;
    const auto out = pool_forward(x, PoolMode::outlier(lambda)).features;
    const auto dyn = pool_forward(x, PoolMode::dynamic(lambda), Schedule{epoch, total}).features;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const auto v = oracle::channel(x, n, c);
        worst = std::max({worst, std::abs(avg(n, c) - oracle::avg_pool(v)),
                          std::abs(mx(n, c) - oracle::max_pool(v)),
                          std::abs(out(n, c) - oracle::outlier_pool(v, lambda)),
                          std::abs(dyn(n, c) - oracle::dynamic_pool(v, lambda, epoch, total))});
      }

    const Shape4 cs{s.n, s.c, 1 + rng() % 8, 1 + rng() % 8};
    std::vector<Tensor4<double>> crops;
    for (int k = 0; k < 4; ++k) crops.push_back(oracle::random_tensor(cs, rng()));
    for (const auto& m : {PoolMode::average(), PoolMode::max(), PoolMode::outlier(lambda),
                          PoolMode::dynamic(lambda)}) {
      const auto cc = cross_crop_pool<double>(crops, m, Schedule{epoch, total}).features;
      for (std::size_t n = 0; n < cs.n; ++n)
        for (std::size_t c = 0; c < cs.c; ++c) {
          std::vector<double> u;
          for (const auto& crop : crops) {
            const auto v = oracle::channel(crop, n, c);
            u.insert(u.end(), v.begin(), v.end());
          }
          double want = 0.0;
          switch (m.kind) {
            case PoolKind::Average: want = oracle::avg_pool(u); break;
            case PoolKind::Max: want = oracle::max_pool(u); break;
            case PoolKind::Outlier: want = oracle::outlier_pool(u, lambda); break;
            case PoolKind::DynamicOutlier:
              want = oracle::dynamic_pool(u, lambda, epoch, total);
              break;
          }
          worst_cc = std::max(worst_cc, std::abs(cc(n, c) - want));
        }
    }
  }
  return {worst <= 1e-10 && worst_cc <= 1e-12,
          fmt("pool max abs diff %.1e, cross-crop vs union %.1e", worst, worst_cc)};
}

AblationResult g_ablation;
bool g_ablation_ok = false;

Outcome table_analog(const RunConfig& config, const fs::path& root) {
  AblateOptions opt;
  opt.output_dir = root;
  opt.threads = harness_threads();
  opt.reuse = false;
  opt.log = [](const std::string& s) { std::cerr << "  " << s << std::endl; };
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = load_run_dataset(config);
  g_ablation = run_ablation(config, ds, opt);
  const double secs = seconds_since(t0);
  write_ablation_outputs(g_ablation, root);
  std::cerr << g_ablation.markdown();
  g_ablation_ok = true;

  std::string rows, cols;
  bool pass = g_ablation.failure_count() == 0 && secs < 1800.0;
  for (const auto& [b, n] : dynamic_wins_per_row(g_ablation)) {
    rows += fmt(" %s %zu/5", to_string(b).c_str(), n);
    pass = pass && n >= 4;
  }
  for (const auto& [p, n] : multires_wins_per_column(g_ablation)) {
    cols += fmt(" %s %zu/5", to_string(p).c_str(), n);
    pass = pass && n >= 4;
  }
  return {pass, fmt("dynamic wins per row:%s; multires wins per column:%s; %.0fs on %zu thread(s)",
                    rows.c_str(), cols.c_str(), secs, opt.threads)};
}

Outcome convergence(const RunConfig& config, const fs::path& root) {
  ConvergenceOptions opt;
  opt.output_dir = root;
  opt.threads = harness_threads();
  opt.reuse = true;  // the Dynamic Outlier runs come from the grid
  const auto r = run_convergence(config, load_run_dataset(config), opt);
  std::string per_seed;
  for (const auto& run : r.runs) {
    per_seed += fmt(" %d/%d", run.dynamic_epochs(), run.outlier_epochs());
  }
  return {r.failures.empty() && r.runs.size() == 5 && r.dynamic_not_slower() >= 4,
          fmt("not slower in %zu/5 seeds (epochs to 90%%, dynamic/outlier:%s)",
              r.dynamic_not_slower(), per_seed.c_str())};
}

Outcome determinism(const fs::path& root) {
  RunConfig c = default_config();
  c.data.synth.train_per_class = 20;
  c.data.synth.test_per_class = 10;
  c.epochs = 3;
  fs::create_directories(root);
  const auto cfg = root / "determinism.ini";
  write_atomic(cfg, serialize(c));
  nlohmann::json a, b;
  for (auto* dst : {&a, &b}) {
    const auto out = root / (dst == &a ? "a" : "b");
    fs::remove_all(out);
    const auto r = run_cli("train --config " + cfg.string() + " --seed 3 --output " + out.string());
    if (r.code != 0) return {false, "train exited with " + std::to_string(r.code)};
    *dst = nlohmann::json::parse(read_file(out / "result.json"));
  }
  const bool same = a["epochs"] == b["epochs"] && a["test_accuracy"] == b["test_accuracy"] &&
                    a["per_class_accuracy"] == b["per_class_accuracy"];
  return {same, same ? "loss curves and test accuracy bitwise identical over 2 runs"
                     : "runs differ"};
}

Outcome split_integrity() {
  const fs::path data = SPARSEPOOL_TEST_DATA;
  bool rejected = false, accepted = false;
  try {
    ingest_folder(data, data / "manifest_leak.csv");
  } catch (const ConfigError&) {
    rejected = true;
  }
  try {
    accepted = ingest_folder(data, data / "manifest_ok.csv").records.size() == 5;
  } catch (const std::exception&) {
  }
  return {rejected && accepted, fmt("leaking manifest %s, compliant fixture %s",
                                    rejected ? "rejected" : "ACCEPTED",
                                    accepted ? "accepted" : "REJECTED")};
}

Outcome cli_contract() {
  const std::string fixture = std::string(SPARSEPOOL_TEST_DATA) + "/outlier_example.spt4";
  const auto ok = run_cli("pool " + fixture + " --mode outlier --lambda 2");
  const auto fail = run_cli("gradcheck --scope pool_max --trials 3 --inject-fault pool_max");
  const auto bad_input = run_cli("pool /nonexistent.spt4");
  const auto bad_config = run_cli("pool " + fixture + " --mode median");
  const bool pass = ok.code == 0 && ok.out == "8\n" && fail.code == 1 && bad_input.code == 2 &&
                    bad_config.code == 2;
  std::string out = ok.out;
  if (!out.empty() && out.back() == '\n') out.pop_back();
  return {pass, fmt("pool printed '%s' (exit %d); fault exit %d; bad input exit %d; bad mode "
                    "exit %d",
                    out.c_str(), ok.code, fail.code, bad_input.code, bad_config.code)};
}

}  // namespace

// acceptance [--expect-fail I]... [OUTPUT_DIR]
// An expected failure still prints FAIL but does not set the exit code.
int main(int argc, char** argv) {
  fs::path root = SPARSEPOOL_ACCEPT_DIR;
  std::set<std::size_t> expected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--expect-fail" && i + 1 < argc) {
      expected.insert(std::stoul(argv[++i]));
    } else {
      root = arg;
    }
  }
  const RunConfig config = default_config();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"analytic degeneracies", degeneracies},
      {"oracle equivalence", oracle_equivalence},
      {"crop strategy x pooling grid", [&] { return table_analog(config, root / "grid"); }},
      {"convergence", [&] { return convergence(config, root / "grid"); }},
      {"determinism", [&] { return determinism(root / "determinism"); }},
      {"split integrity", split_integrity},
      {"cli contract", cli_contract},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const bool known = expected.count(i + 1) > 0;
    failed += !o.pass && !known;
    std::printf("%s %zu %s: %s%s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), !o.pass && known ? " (expected)" : "");
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
