// sparsepool command line: gradient checks, pooling of tensor files,
// synthetic data export, training, ablation grid, convergence comparison,
// and result reports.
//
// Exit codes: 0 success, 1 check or run failure, 2 configuration or input
// error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sparsepool/sparsepool.hpp"

namespace sp = sparsepool;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitInput = 2;

sp::RunConfig load_or_default(const std::string& path) {
  return path.empty() ? sp::default_config() : sp::load_config(path);
}

std::vector<std::uint64_t> seed_list(const std::vector<std::uint64_t>& seeds, std::size_t count) {
  if (!seeds.empty()) return seeds;
  if (count == 0) throw sp::ConfigError("--num-seeds must be >= 1");
  std::vector<std::uint64_t> out;
  for (std::size_t i = 1; i <= count; ++i) out.push_back(i);
  return out;
}

void log_line(const std::string& s) {
  std::cerr << s << std::endl;
}

int cmd_gradcheck(const std::string& scope, std::size_t trials, std::uint64_t seed,
                  const std::string& json_out, const std::string& fault) {
  sp::GradcheckOptions opt;
  opt.only = scope == "all" ? "" : scope;
  opt.trials = trials;
  opt.seed = seed;
  if (!fault.empty()) {
    const auto& ops = sp::gradcheck_operators();
    if (std::find(ops.begin(), ops.end(), fault) == ops.end()) {
      throw sp::ConfigError("--inject-fault: unknown operator '" + fault + "'");
    }
    opt.corrupt = [fault](const std::string& op, std::span<double> g) {
      if (op == fault && !g.empty()) g[0] += 1.0;
    };
  }
  const auto report = sp::run_gradcheck(opt);
  const auto json = report.to_json();
  const std::string text = json.dump(2) + "\n";
  if (json_out.empty()) {
    std::cout << text;
  } else {
    sp::write_atomic(json_out, text);
    for (const auto& [op, s] : json["operators"].items()) {
      std::printf("%-16s %zu/%zu  max rel err %.3e\n", op.c_str(),
                  s["passed"].get<std::size_t>(), s["trials"].get<std::size_t>(),
                  s["max_rel_error"].get<double>());
    }
  }
  return report.passed() ? 0 : kExitFailure;
}

int cmd_pool(const std::string& input, const std::string& mode_name, double lambda,
             std::optional<int> epoch, int total_epochs, const std::string& mask_out) {
  sp::Tensor4<double> tensor;
  try {
    tensor = sp::load_spt4(input).tensor;
  } catch (const sp::NumericError& e) {
    throw sp::IoError(input + ": " + e.what());  // bad input, not a run failure
  }
  const sp::PoolKind kind = sp::parse_pool_kind(mode_name);
  const sp::PoolMode mode{kind, lambda};
  std::optional<sp::Schedule> schedule;
  if (kind == sp::PoolKind::DynamicOutlier) {
    schedule = sp::Schedule{epoch.value_or(total_epochs), total_epochs};
    schedule->weights();  // validates the pair
  }
  const auto result = sp::pool_forward(tensor, mode, schedule);
  const auto& f = result.features;
  for (std::size_t r = 0; r < f.rows(); ++r) {
    for (std::size_t c = 0; c < f.cols(); ++c) {
      std::printf(c ? ",%.17g" : "%.17g", f(r, c));
    }
    std::printf("\n");
  }
  if (!mask_out.empty()) sp::save_spt4(mask_out, result.ctx.mask_tensor<double>());
  return 0;
}

int cmd_synth(const std::string& config_path, const std::string& out, const std::string& format) {
  if (format != "png" && format != "spt4") {
    throw sp::ConfigError("--format must be png or spt4");
  }
  const auto config = load_or_default(config_path);
  const auto index = sp::dump_synth(sp::generate(config.data.synth), out, "." + format);
  std::printf("wrote %zu train and %zu test images under %s\n", index.count(sp::Split::Train),
              index.count(sp::Split::Test), out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed,
              const std::string& output) {
  auto config = load_or_default(config_path);
  if (seed) config.seed = *seed;
  sp::TrainOptions opt;
  opt.output_dir = output.empty() ? sp::run_dir(config.output_dir, config)
                                  : std::filesystem::path(output);
  opt.on_epoch = [](const sp::EpochRecord& e) {
    std::fprintf(stderr, "epoch %d  loss %.4f  train acc %.4f  empty-set rate %.3f\n",
                 e.epoch, e.train_loss, e.train_accuracy, e.fallback_rate);
  };
  const auto result = sp::train_run(config, opt);
  std::printf("test accuracy %.4f  (%s, fingerprint %s, %.1fs)\n", result.test_accuracy,
              opt.output_dir.string().c_str(), result.fingerprint.c_str(),
              result.wall_clock_seconds);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::uint64_t>& seeds,
               std::size_t num_seeds, const std::string& output, bool fresh) {
  const auto config = load_or_default(config_path);
  sp::AblateOptions opt;
  opt.seeds = seed_list(seeds, num_seeds);
  opt.output_dir = output.empty() ? std::filesystem::path(config.output_dir) / "ablation"
                                  : std::filesystem::path(output);
  opt.threads = sp::harness_threads();
  opt.reuse = !fresh;
  opt.log = log_line;
  const auto ds = sp::load_run_dataset(config);
  const auto result = sp::run_ablation(config, ds, opt);
  sp::write_ablation_outputs(result, opt.output_dir);
  std::cout << result.markdown() << "\n";
  for (const auto& [b, n] : sp::dynamic_wins_per_row(result)) {
    std::printf("%s: Dynamic Outlier beats Average and Max in %zu/%zu seeds\n",
                sp::display_name(b).c_str(), n, opt.seeds.size());
  }
  for (const auto& [p, n] : sp::multires_wins_per_column(result)) {
    std::printf("%s: MultiRes beats GlobalOnly in %zu/%zu seeds\n",
                sp::display_name(p).c_str(), n, opt.seeds.size());
  }
  for (const auto& c : result.cells) {
    for (const auto& f : c.failures) {
      std::fprintf(stderr, "failed %s %s\n", sp::cell_name(c.branch, c.pool).c_str(), f.c_str());
    }
  }
  return result.failure_count() == 0 ? 0 : kExitFailure;
}

int cmd_convergence(const std::string& config_path, const std::vector<std::uint64_t>& seeds,
                    std::size_t num_seeds, const std::string& output, bool fresh) {
  const auto config = load_or_default(config_path);
  sp::ConvergenceOptions opt;
  opt.seeds = seed_list(seeds, num_seeds);
  opt.output_dir = output.empty() ? std::filesystem::path(config.output_dir) / "convergence"
                                  : std::filesystem::path(output);
  opt.threads = sp::harness_threads();
  opt.reuse = !fresh;
  opt.log = log_line;
  const auto ds = sp::load_run_dataset(config);
  const auto result = sp::run_convergence(config, ds, opt);
  std::cout << result.summary_csv();
  std::printf("Dynamic Outlier reaches 90%% of final training accuracy no later than Outlier "
              "in %zu/%zu seeds\n",
              result.dynamic_not_slower(), opt.seeds.size());
  for (const auto& f : result.failures) std::fprintf(stderr, "failed %s\n", f.c_str());
  return result.failures.empty() ? 0 : kExitFailure;
}

int cmd_report(const std::string& dir, const std::string& out) {
  const auto report = sp::build_report(dir);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  if (out.empty()) {
    std::cout << report.markdown;
  } else {
    sp::write_atomic(out, report.markdown);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-feature pooling experiments"};
  app.require_subcommand(1);

  std::string scope = "all", json_out, fault;
  std::size_t trials = 20;
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--scope", scope, "all, pooling, layers, model, or one operator name");
  gc->add_option("--trials", trials, "Random cases per operator")->check(CLI::PositiveNumber);
  gc->add_option("--seed", gc_seed, "Random seed");
  gc->add_option("--json", json_out, "Write the JSON report here instead of stdout");
  gc->add_option("--inject-fault", fault, "Corrupt one operator's backward (negative control)");

  std::string pool_input, pool_mode = "outlier", mask_out;
  double lambda = sp::kDefaultLambda;
  std::optional<int> epoch;
  int total_epochs = 20;
  auto* pool = app.add_subcommand("pool", "Pool an SPT4 tensor and print the N x C features");
  pool->add_option("input", pool_input, "SPT4 tensor file")->required();
  pool->add_option("--mode", pool_mode, "avg, max, outlier or dynamic");
  pool->add_option("--lambda", lambda, "Threshold multiplier");
  pool->add_option("--epoch", epoch, "Current epoch for dynamic (default: total epochs)");
  pool->add_option("--total-epochs", total_epochs, "Total epochs for dynamic");
  pool->add_option("--mask-out", mask_out, "Write the pooling mask as SPT4");

  std::string config_path, synth_out, format = "png";
  auto* synth = app.add_subcommand("synth", "Write the synthetic dataset as an image folder");
  synth->add_option("--config", config_path, "Run config file");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--format", format, "png or spt4");

  std::optional<std::uint64_t> train_seed;
  std::string output;
  auto* train = app.add_subcommand("train", "Train one configuration");
  train->add_option("--config", config_path, "Run config file");
  train->add_option("--seed", train_seed, "Override the training seed");
  train->add_option("--output", output, "Directory for checkpoint.spck and result.json");

  std::vector<std::uint64_t> seeds;
  std::size_t num_seeds = 5;
  bool fresh = false;
  auto* ablate = app.add_subcommand("ablate", "Run the 3x3 crop strategy by pooling grid");
  auto* conv = app.add_subcommand("convergence", "Compare Dynamic Outlier with static Outlier");
  for (auto* sub : {ablate, conv}) {
    sub->add_option("--config", config_path, "Run config file");
    sub->add_option("--seeds", seeds, "Explicit seeds")->delimiter(',');
    sub->add_option("--num-seeds", num_seeds, "Use seeds 1..n");
    sub->add_option("--output", output, "Output directory");
    sub->add_flag("--fresh", fresh, "Retrain even when matching results exist");
  }

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Summarize a directory of result files");
  report->add_option("dir", report_dir, "Result directory")->required();
  report->add_option("--output", output, "Write markdown here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }

  try {
    if (*gc) return cmd_gradcheck(scope, trials, gc_seed, json_out, fault);
    if (*pool) return cmd_pool(pool_input, pool_mode, lambda, epoch, total_epochs, mask_out);
    if (*synth) return cmd_synth(config_path, synth_out, format);
    if (*train) return cmd_train(config_path, train_seed, output);
    if (*ablate) return cmd_ablate(config_path, seeds, num_seeds, output, fresh);
    if (*conv) return cmd_convergence(config_path, seeds, num_seeds, output, fresh);
    if (*report) return cmd_report(report_dir, output);
  } catch (const sp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const sp::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const sp::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
