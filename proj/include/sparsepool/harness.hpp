#pragma once

// Experiment orchestration: the 3x3 crop-strategy by pooling grid, the
// dynamic-vs-static convergence comparison, and aggregation of result files
// into markdown reports.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sparsepool/config.hpp"
#include "sparsepool/train.hpp"

namespace sparsepool {

inline const std::vector<BranchKind>& ablation_rows() {
  static const std::vector<BranchKind> rows{BranchKind::GlobalOnly, BranchKind::LocalOnly,
                                            BranchKind::MultiRes};
  return rows;
}

inline const std::vector<PoolKind>& ablation_columns() {
  static const std::vector<PoolKind> cols{PoolKind::Average, PoolKind::Max,
                                          PoolKind::DynamicOutlier};
  return cols;
}

// Worker count: SPARSEPOOL_THREADS if set to a positive integer, otherwise
// the hardware concurrency.
inline std::size_t harness_threads() {
  if (const char* env = std::getenv("SPARSEPOOL_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("SPARSEPOOL_THREADS must be a positive integer, got '") +
                      env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs job(i) for i in [0, count) on up to `threads` workers.
inline void parallel_for(std::size_t count, std::size_t threads,
                         const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) job(i);
    });
  }
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for fewer than two values.
inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::string format_mean_std(const std::vector<double>& v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f ± %.4f", mean_of(v), stddev_of(v));
  return buf;
}

inline std::string cell_name(BranchKind b, PoolKind p) {
  return to_string(b) + "-" + to_string(p);
}

// Markdown table with the given row and column headers.
inline std::string markdown_table(const std::string& corner,
                                  const std::vector<std::string>& rows,
                                  const std::vector<std::string>& cols,
                                  const std::function<std::string(std::size_t, std::size_t)>& cell) {
  std::ostringstream os;
  os << "| " << corner << " |";
  for (const auto& c : cols) os << " " << c << " |";
  os << "\n|---|";
  for (std::size_t j = 0; j < cols.size(); ++j) os << "---|";
  os << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << "| " << rows[i] << " |";
    for (std::size_t j = 0; j < cols.size(); ++j) os << " " << cell(i, j) << " |";
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Result reuse

// A result.json under dir is reused when it parses and was produced by the
// same configuration and seed.
inline std::optional<ExperimentResult> load_matching_result(const std::filesystem::path& dir,
                                                            const RunConfig& config) {
  const auto path = dir / "result.json";
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    std::ifstream is(path);
    auto r = ExperimentResult::from_json(nlohmann::json::parse(is));
    if (r.fingerprint == fingerprint(config) && r.seed == config.seed &&
        r.epochs.size() == static_cast<std::size_t>(config.epochs)) {
      return r;
    }
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

inline std::filesystem::path run_dir(const std::filesystem::path& root, const RunConfig& c) {
  return root / cell_name(c.model.branch.kind, c.model.branch.pool_mode.kind) /
         ("seed-" + std::to_string(c.seed));
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
  BranchKind branch = BranchKind::MultiRes;
  PoolKind pool = PoolKind::Average;
  std::string fingerprint;
  std::vector<ExperimentResult> runs;  // successful runs, in seed order
  std::vector<std::string> failures;   // one message per failed seed

  std::vector<double> accuracies() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.test_accuracy);
    return v;
  }

  std::optional<double> accuracy_for(std::uint64_t seed) const {
    for (const auto& r : runs) {
      if (r.seed == seed) return r.test_accuracy;
    }
    return std::nullopt;
  }
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationCell> cells;  // row-major over ablation_rows() x ablation_columns()

  const AblationCell& at(BranchKind b, PoolKind p) const {
    for (const auto& c : cells) {
      if (c.branch == b && c.pool == p) return c;
    }
    throw Error("ablation: no cell " + cell_name(b, p));
  }

  std::size_t failure_count() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.failures.size();
    return n;
  }

  std::string markdown() const {
    std::vector<std::string> rows, cols;
    for (auto b : ablation_rows()) rows.push_back(display_name(b));
    for (auto p : ablation_columns()) cols.push_back(display_name(p));
    return markdown_table("Crop strategy", rows, cols, [&](std::size_t i, std::size_t j) {
      const auto& c = at(ablation_rows()[i], ablation_columns()[j]);
      if (c.runs.empty()) return std::string("failed");
      std::string s = format_mean_std(c.accuracies());
      if (!c.failures.empty()) s += " (" + std::to_string(c.failures.size()) + " failed)";
      return s;
    });
  }

  // One line per (cell, seed): branch,pool,seed,fingerprint,status,test_accuracy.
  std::string csv() const {
    std::ostringstream os;
    os << "branch,pool,seed,fingerprint,status,test_accuracy\n";
    for (const auto& c : cells) {
      for (auto seed : seeds) {
        const auto acc = c.accuracy_for(seed);
        char buf[32] = "";
        if (acc) std::snprintf(buf, sizeof(buf), "%.6f", *acc);
        os << to_string(c.branch) << "," << to_string(c.pool) << "," << seed << ","
           << c.fingerprint << "," << (acc ? "ok" : "failed") << "," << buf << "\n";
      }
    }
    return os.str();
  }
};

struct AblateOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::filesystem::path output_dir;  // per-run directories; nothing written when empty
  std::size_t threads = 1;
  bool reuse = true;                 // skip runs whose result.json already matches
  std::function<void(const std::string&)> log;
};

inline RunConfig cell_config(const RunConfig& base, BranchKind b, PoolKind p) {
  RunConfig c = base;
  c.model.branch.kind = b;
  c.model.branch.pool_mode.kind = p;
  return c;
}

// Trains one (config, seed) run, reusing a matching result when allowed.
inline ExperimentResult run_or_reuse(const RunConfig& config, const Dataset& ds,
                                     const std::filesystem::path& root, bool reuse) {
  TrainOptions opt;
  if (!root.empty()) {
    opt.output_dir = run_dir(root, config);
    if (reuse) {
      if (auto r = load_matching_result(opt.output_dir, config)) return *r;
    }
  }
  return train_run(config, ds, opt);
}

inline AblationResult run_ablation(const RunConfig& base, const Dataset& ds,
                                   const AblateOptions& opt) {
  if (opt.seeds.empty()) throw ConfigError("ablate: at least one seed is required");
  AblationResult result;
  result.seeds = opt.seeds;
  for (auto b : ablation_rows()) {
    for (auto p : ablation_columns()) {
      AblationCell cell;
      cell.branch = b;
      cell.pool = p;
      cell.fingerprint = fingerprint(cell_config(base, b, p));
      result.cells.push_back(std::move(cell));
    }
  }

  struct Job {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    for (auto s : opt.seeds) jobs.push_back({i, s});
  }
  std::vector<std::optional<ExperimentResult>> done(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::mutex log_mutex;
  parallel_for(jobs.size(), opt.threads, [&](std::size_t j) {
    const auto& cell = result.cells[jobs[j].cell];
    RunConfig c = cell_config(base, cell.branch, cell.pool);
    c.seed = jobs[j].seed;
    try {
      done[j] = run_or_reuse(c, ds, opt.output_dir, opt.reuse);
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
    if (opt.log) {
      std::lock_guard lock(log_mutex);
      char buf[64] = "";
      if (done[j]) std::snprintf(buf, sizeof(buf), "test accuracy %.4f", done[j]->test_accuracy);
      opt.log(cell_name(cell.branch, cell.pool) + " seed " + std::to_string(c.seed) + ": " +
              (done[j] ? std::string(buf) : "failed: " + errors[j]));
    }
  });
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    auto& cell = result.cells[jobs[j].cell];
    if (done[j]) {
      cell.runs.push_back(std::move(*done[j]));
    } else {
      cell.failures.push_back("seed " + std::to_string(jobs[j].seed) + ": " + errors[j]);
    }
  }
  return result;
}

// Seeds in which `winner` beats every cell in `losers` (strictly). Seeds with
// a missing run count as not satisfied.
inline std::size_t seeds_where_beats(const AblationResult& r, const AblationCell& winner,
                                     const std::vector<const AblationCell*>& losers) {
  std::size_t n = 0;
  for (auto seed : r.seeds) {
    const auto w = winner.accuracy_for(seed);
    if (!w) continue;
    bool ok = true;
    for (const auto* l : losers) {
      const auto a = l->accuracy_for(seed);
      ok = ok && a && *w > *a;
    }
    n += ok;
  }
  return n;
}

// Per-row: seeds where Dynamic Outlier beats Average and Max in that row.
inline std::map<BranchKind, std::size_t> dynamic_wins_per_row(const AblationResult& r) {
  std::map<BranchKind, std::size_t> out;
  for (auto b : ablation_rows()) {
    out[b] = seeds_where_beats(r, r.at(b, PoolKind::DynamicOutlier),
                               {&r.at(b, PoolKind::Average), &r.at(b, PoolKind::Max)});
  }
  return out;
}

// Per-column: seeds where MultiRes beats GlobalOnly in that column.
inline std::map<PoolKind, std::size_t> multires_wins_per_column(const AblationResult& r) {
  std::map<PoolKind, std::size_t> out;
  for (auto p : ablation_columns()) {
    out[p] = seeds_where_beats(r, r.at(BranchKind::MultiRes, p),
                               {&r.at(BranchKind::GlobalOnly, p)});
  }
  return out;
}

inline void write_ablation_outputs(const AblationResult& r, const std::filesystem::path& dir) {
  write_atomic(dir / "ablation.md", r.markdown());
  write_atomic(dir / "ablation.csv", r.csv());
}

// ---------------------------------------------------------------------------
// Convergence comparison

// Number of epochs until training accuracy first reaches fraction * final
// accuracy (1-based; the final epoch always qualifies).
inline int epochs_to_fraction(const std::vector<EpochRecord>& epochs, double fraction = 0.9) {
  if (epochs.empty()) throw Error("epochs_to_fraction: no epochs");
  const double target = fraction * epochs.back().train_accuracy;
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    if (epochs[e].train_accuracy >= target) return static_cast<int>(e + 1);
  }
  return static_cast<int>(epochs.size());
}

struct ConvergenceRun {
  std::uint64_t seed = 0;
  ExperimentResult dynamic;
  ExperimentResult outlier;

  int dynamic_epochs() const { return epochs_to_fraction(dynamic.epochs); }
  int outlier_epochs() const { return epochs_to_fraction(outlier.epochs); }

  // Header, one row per epoch, and a summary row.
  std::string csv() const {
    std::ostringstream os;
    os << "epoch,dynamic_train_accuracy,outlier_train_accuracy,dynamic_train_loss,"
          "outlier_train_loss\n";
    char buf[160];
    for (std::size_t e = 0; e < dynamic.epochs.size(); ++e) {
      const auto& d = dynamic.epochs[e];
      const auto& o = outlier.epochs[e];
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f\n", d.epoch, d.train_accuracy,
                    o.train_accuracy, d.train_loss, o.train_loss);
      os << buf;
    }
    os << "epochs_to_90pct," << dynamic_epochs() << "," << outlier_epochs() << ",,\n";
    return os.str();
  }

  // Training-accuracy curves of both runs as a standalone SVG line chart.
  std::string svg() const {
    const double w = 640, h = 400, left = 60, right = 20, top = 30, bottom = 50;
    const std::size_t n = dynamic.epochs.size();
    auto px = [&](std::size_t e) {
      return left + (n > 1 ? static_cast<double>(e) / static_cast<double>(n - 1) : 0.0) *
                        (w - left - right);
    };
    auto py = [&](double acc) { return top + (1.0 - acc) * (h - top - bottom); };
    auto polyline = [&](const std::vector<EpochRecord>& ep, const char* color) {
      std::ostringstream os;
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t e = 0; e < ep.size(); ++e) {
        os << px(e) << "," << py(ep[e].train_accuracy) << " ";
      }
      os << "\"/>\n";
      return os.str();
    };
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
       << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (int t = 0; t <= 10; t += 2) {
      const double y = py(t / 10.0);
      os << "<line x1=\"" << left << "\" x2=\"" << w - right << "\" y1=\"" << y << "\" y2=\""
         << y << "\" stroke=\"#ddd\"/>\n<text x=\"" << left - 8 << "\" y=\"" << y + 4
         << "\" font-size=\"12\" text-anchor=\"end\">" << t / 10.0 << "</text>\n";
    }
    os << "<text x=\"" << w / 2 << "\" y=\"" << h - 12
       << "\" font-size=\"13\" text-anchor=\"middle\">epoch</text>\n"
       << "<text x=\"" << w / 2 << "\" y=\"18\" font-size=\"14\" text-anchor=\"middle\">"
       << "training accuracy, seed " << seed << "</text>\n"
       << polyline(dynamic.epochs, "#1f77b4") << polyline(outlier.epochs, "#d62728")
       << "<text x=\"" << w - right - 150 << "\" y=\"" << h - bottom - 30
       << "\" font-size=\"12\" fill=\"#1f77b4\">Dynamic Outlier</text>\n"
       << "<text x=\"" << w - right - 150 << "\" y=\"" << h - bottom - 14
       << "\" font-size=\"12\" fill=\"#d62728\">Outlier</text>\n</svg>\n";
    return os.str();
  }
};

struct ConvergenceResult {
  std::vector<ConvergenceRun> runs;
  std::vector<std::string> failures;

  // Seeds where dynamic reaches the threshold in no more epochs than static.
  std::size_t dynamic_not_slower() const {
    std::size_t n = 0;
    for (const auto& r : runs) n += r.dynamic_epochs() <= r.outlier_epochs();
    return n;
  }

  std::string summary_csv() const {
    std::ostringstream os;
    os << "seed,dynamic_epochs_to_90pct,outlier_epochs_to_90pct,dynamic_final_train_accuracy,"
          "outlier_final_train_accuracy\n";
    char buf[160];
    for (const auto& r : runs) {
      std::snprintf(buf, sizeof(buf), "%llu,%d,%d,%.6f,%.6f\n",
                    static_cast<unsigned long long>(r.seed), r.dynamic_epochs(),
                    r.outlier_epochs(), r.dynamic.epochs.back().train_accuracy,
                    r.outlier.epochs.back().train_accuracy);
      os << buf;
    }
    return os.str();
  }
};

struct ConvergenceOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::filesystem::path output_dir;
  std::size_t threads = 1;
  bool reuse = true;
  std::function<void(const std::string&)> log;
};

// Trains the base config under Dynamic Outlier and static Outlier pooling,
// identical otherwise, for each seed.
inline ConvergenceResult run_convergence(const RunConfig& base, const Dataset& ds,
                                         const ConvergenceOptions& opt) {
  if (opt.seeds.empty()) throw ConfigError("convergence: at least one seed is required");
  std::vector<RunConfig> configs;
  for (auto seed : opt.seeds) {
    for (auto kind : {PoolKind::DynamicOutlier, PoolKind::Outlier}) {
      RunConfig c = base;
      c.model.branch.pool_mode.kind = kind;
      c.seed = seed;
      configs.push_back(c);
    }
  }
  std::vector<std::optional<ExperimentResult>> done(configs.size());
  std::vector<std::string> errors(configs.size());
  std::mutex log_mutex;
  parallel_for(configs.size(), opt.threads, [&](std::size_t j) {
    try {
      done[j] = run_or_reuse(configs[j], ds, opt.output_dir, opt.reuse);
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
    if (opt.log) {
      std::lock_guard lock(log_mutex);
      opt.log(cell_name(configs[j].model.branch.kind, configs[j].model.branch.pool_mode.kind) +
              " seed " + std::to_string(configs[j].seed) +
              (done[j] ? ": done" : ": failed: " + errors[j]));
    }
  });
  ConvergenceResult result;
  for (std::size_t i = 0; i < opt.seeds.size(); ++i) {
    auto& d = done[2 * i];
    auto& o = done[2 * i + 1];
    if (!d || !o) {
      result.failures.push_back("seed " + std::to_string(opt.seeds[i]) + ": " +
                                (d ? errors[2 * i + 1] : errors[2 * i]));
      continue;
    }
    result.runs.push_back({opt.seeds[i], std::move(*d), std::move(*o)});
  }
  if (!opt.output_dir.empty()) {
    for (const auto& r : result.runs) {
      const std::string stem = "convergence-seed-" + std::to_string(r.seed);
      write_atomic(opt.output_dir / (stem + ".csv"), r.csv());
      write_atomic(opt.output_dir / (stem + ".svg"), r.svg());
    }
    write_atomic(opt.output_dir / "convergence.csv", result.summary_csv());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Report

struct ReportOutput {
  std::string markdown;
  std::vector<std::string> warnings;
  std::size_t results = 0;
};

// Aggregates every result.json below dir. Unreadable or malformed files are
// skipped with a warning; seeds of one cell with differing fingerprints are
// reported but still aggregated.
inline ReportOutput build_report(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("report: " + dir.string() + " is not a directory");
  ReportOutput out;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  using Key = std::pair<BranchKind, PoolKind>;
  std::map<Key, std::vector<ExperimentResult>> cells;
  for (const auto& f : files) {
    try {
      std::ifstream is(f);
      auto r = ExperimentResult::from_json(nlohmann::json::parse(is));
      for (double a : r.per_class_accuracy) {
        if (!(a >= 0.0 && a <= 1.0)) throw Error("per-class accuracy outside [0, 1]");
      }
      if (!(r.test_accuracy >= 0.0 && r.test_accuracy <= 1.0)) {
        throw Error("test accuracy outside [0, 1]");
      }
      cells[{r.branch, r.pool.kind}].push_back(std::move(r));
      ++out.results;
    } catch (const std::exception& e) {
      out.warnings.push_back("skipping " + f.string() + ": " + e.what());
    }
  }
  for (const auto& [key, runs] : cells) {
    std::set<std::string> fps;
    for (const auto& r : runs) fps.insert(r.fingerprint);
    if (fps.size() > 1) {
      out.warnings.push_back("fingerprint mismatch across seeds of " +
                             cell_name(key.first, key.second) + " (" +
                             std::to_string(fps.size()) + " distinct configs)");
    }
  }

  std::vector<BranchKind> rows;
  std::vector<PoolKind> cols;
  for (auto b : ablation_rows()) {
    if (std::any_of(cells.begin(), cells.end(), [&](const auto& c) { return c.first.first == b; })) {
      rows.push_back(b);
    }
  }
  for (auto p : {PoolKind::Average, PoolKind::Max, PoolKind::Outlier, PoolKind::DynamicOutlier}) {
    if (std::any_of(cells.begin(), cells.end(), [&](const auto& c) { return c.first.second == p; })) {
      cols.push_back(p);
    }
  }
  if (cols.empty()) {
    cols = ablation_columns();
  }
  std::vector<std::string> row_names, col_names;
  for (auto b : rows) row_names.push_back(display_name(b));
  for (auto p : cols) col_names.push_back(display_name(p));

  std::ostringstream md;
  md << "# Results\n\n" << out.results << " result file(s).\n\n"
     << "## Test accuracy (mean ± std over seeds)\n\n";
  md << markdown_table("Crop strategy", row_names, col_names, [&](std::size_t i, std::size_t j) {
    const auto it = cells.find({rows[i], cols[j]});
    if (it == cells.end()) return std::string("-");
    std::vector<double> acc;
    for (const auto& r : it->second) acc.push_back(r.test_accuracy);
    return format_mean_std(acc) + " (n=" + std::to_string(acc.size()) + ")";
  });

  if (!cells.empty()) {
    md << "\n## Per-class test accuracy (mean over seeds)\n\n";
    std::size_t k = 0;
    for (const auto& [key, runs] : cells) {
      for (const auto& r : runs) k = std::max(k, r.per_class_accuracy.size());
    }
    std::vector<std::string> names, classes;
    std::vector<const std::vector<ExperimentResult>*> order;
    for (const auto& [key, runs] : cells) {
      names.push_back(display_name(key.first) + " / " + display_name(key.second));
      order.push_back(&runs);
    }
    for (std::size_t c = 0; c < k; ++c) classes.push_back(std::to_string(c));
    md << markdown_table("Cell \\ class", names, classes, [&](std::size_t i, std::size_t c) {
      std::vector<double> v;
      for (const auto& r : *order[i]) {
        if (c < r.per_class_accuracy.size()) v.push_back(r.per_class_accuracy[c]);
      }
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3f", mean_of(v));
      return std::string(buf);
    });

    std::vector<std::string> fb_names;
    std::vector<const std::vector<ExperimentResult>*> fb_order;
    std::size_t epochs = 0;
    for (const auto& [key, runs] : cells) {
      if (key.second != PoolKind::Outlier && key.second != PoolKind::DynamicOutlier) continue;
      fb_names.push_back(display_name(key.first) + " / " + display_name(key.second));
      fb_order.push_back(&runs);
      for (const auto& r : runs) epochs = std::max(epochs, r.epochs.size());
    }
    if (!fb_names.empty()) {
      md << "\n## Empty outlier set rate per epoch (mean over seeds)\n\n";
      std::vector<std::string> epoch_names;
      for (std::size_t e = 0; e < epochs; ++e) epoch_names.push_back(std::to_string(e));
      md << markdown_table("Cell \\ epoch", fb_names, epoch_names,
                           [&](std::size_t i, std::size_t e) {
                             std::vector<double> v;
                             for (const auto& r : *fb_order[i]) {
                               if (e < r.epochs.size()) v.push_back(r.epochs[e].fallback_rate);
                             }
                             char buf[32];
                             std::snprintf(buf, sizeof(buf), "%.3f", mean_of(v));
                             return std::string(buf);
                           });
    }
  }
  if (!out.warnings.empty()) {
    md << "\n## Warnings\n\n";
    for (const auto& w : out.warnings) md << "- " << w << "\n";
  }
  out.markdown = md.str();
  return out;
}

}  // namespace sparsepool
