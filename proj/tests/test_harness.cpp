#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include "sparsepool/config.hpp"
#include "sparsepool/gradcheck.hpp"
#include "sparsepool/harness.hpp"
#include "sparsepool/train.hpp"

using namespace sparsepool;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig c = default_config();
  auto& s = c.data.synth;
  s.num_classes = 3;
  s.train_per_class = 4;
  s.test_per_class = 2;
  s.image_size = 16;
  s.blob_size = 4;
  s.blob_min = 1;
  s.blob_max = 1;
  s.texture_scale = 4.0;
  s.stripe_period = 2;
  s.clutter_patches = 0;
  s.decoy_blobs = 0;
  c.model.num_classes = 3;
  c.model.branch.global_input_size = 8;
  c.model.branch.local_crop_size = 8;
  c.model.trunk_widths = {2, 3};
  c.epochs = 2;
  c.batch_size = 4;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("sparsepool_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

std::size_t count_lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

}  // namespace

TEST(Config, SerializeParseRoundTripOnRandomConfigs) {
  std::mt19937_64 rng(3);
  const std::vector<BranchKind> branches{BranchKind::GlobalOnly, BranchKind::LocalOnly,
                                         BranchKind::MultiRes};
  const std::vector<PoolKind> pools{PoolKind::Average, PoolKind::Max, PoolKind::Outlier,
                                    PoolKind::DynamicOutlier};
  for (int trial = 0; trial < 100; ++trial) {
    RunConfig c = default_config();
    auto& s = c.data.synth;
    s.num_classes = 2 + rng() % 20;
    s.train_per_class = 1 + rng() % 300;
    s.test_per_class = 1 + rng() % 100;
    s.image_size = 32 + rng() % 64;
    s.blob_size = 2 + rng() % 6;
    s.blob_min = rng() % 3;
    s.blob_max = s.blob_min + rng() % 3;
    s.visibility = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    s.texture_contrast = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    s.pixel_noise = std::uniform_real_distribution<double>(0.0, 0.1)(rng);
    s.clutter_patches = rng() % 3;
    s.decoy_blobs = rng() % 2;
    s.background_tint = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    s.seed = rng();
    c.model.num_classes = s.num_classes;
    c.model.branch.kind = branches[rng() % branches.size()];
    c.model.branch.pool_mode.kind = pools[rng() % pools.size()];
    c.model.branch.pool_mode.lambda = std::uniform_real_distribution<double>(0.0, 4.0)(rng);
    c.model.branch.global_input_size = 8 + rng() % 64;
    c.model.branch.local_crop_size = 8 + rng() % 32;
    c.model.trunk_widths = {1 + rng() % 16, 1 + rng() % 16};
    c.epochs = 1 + static_cast<int>(rng() % 50);
    c.batch_size = 1 + rng() % 64;
    c.sgd.learning_rate = std::uniform_real_distribution<double>(1e-4, 1.0)(rng);
    c.sgd.momentum = std::uniform_real_distribution<double>(0.0, 0.99)(rng);
    c.seed = rng() % 1000;
    c.sgd.seed = c.seed;
    c.output_dir = "out-" + std::to_string(trial);
    ASSERT_EQ(parse_config(serialize(c)), c) << serialize(c);
  }
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config("[train]\nepochs = 3\nepoch = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("[optimizer]\nlr = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nepochs = three\n"), ConfigError);
  EXPECT_THROW(parse_config("[pool]\nmode = median\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nepochs = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\ntrunk_widths = 8,,16\n"), ConfigError);
  try {
    parse_config("[train]\nlearning_rte = 0.1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rte"), std::string::npos);
  }
  EXPECT_NO_THROW(parse_config(""));
}

TEST(Config, FingerprintIgnoresSeedAndOutputDirOnly) {
  const auto base = tiny_config();
  auto c = base;
  c.seed = 99;
  c.output_dir = "elsewhere";
  EXPECT_EQ(fingerprint(c), fingerprint(base));
  EXPECT_EQ(fingerprint(base).size(), 16u);
  c = base;
  c.model.branch.pool_mode.lambda = 2.5;
  EXPECT_NE(fingerprint(c), fingerprint(base));
  c = base;
  c.data.synth.seed += 1;
  EXPECT_NE(fingerprint(c), fingerprint(base));
}

TEST(Train, SameSeedGivesIdenticalResults) {
  const auto c = tiny_config();
  const auto ds = load_run_dataset(c);
  const auto a = train_run(c, ds);
  const auto b = train_run(c, ds);
  EXPECT_EQ(a.epochs, b.epochs);
  EXPECT_EQ(a.test_accuracy, b.test_accuracy);
  EXPECT_EQ(a.per_class_accuracy, b.per_class_accuracy);
  auto other = c;
  other.seed = 2;
  EXPECT_NE(train_run(other, ds).epochs, a.epochs);
}

TEST(Train, LossDecreasesOnSmallProblem) {
  auto c = tiny_config();
  c.data.synth.train_per_class = 20;
  c.data.synth.image_size = 24;
  c.model.branch.kind = BranchKind::GlobalOnly;
  c.model.branch.global_input_size = 24;
  c.model.trunk_widths = {6, 8};
  c.model.branch.pool_mode = PoolMode::average();
  c.epochs = 15;
  c.sgd.learning_rate = 0.05;
  const auto r = train_run(c, load_run_dataset(c));
  EXPECT_LT(r.epochs.back().train_loss, r.epochs.front().train_loss);
}

TEST(Train, UntrainedModelIsAtChance) {
  RunConfig c = default_config();
  c.data.synth.train_per_class = 1;
  c.data.synth.test_per_class = 100;
  c.data.synth.image_size = 32;
  c.data.synth.blob_size = 4;
  c.model.branch.kind = BranchKind::GlobalOnly;
  c.model.branch.global_input_size = 16;
  c.model.trunk_widths = {4, 4};
  const auto ds = load_run_dataset(c);
  double sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto model = Model<float>::create(c.model, seed);
    BatchLoader loader(ds);
    sum += evaluate(model, ds, loader, Schedule{2, 2}, 64).accuracy;
  }
  EXPECT_NEAR(sum / 5.0, 0.10, 0.05);
}

TEST(Train, NonFiniteGradientAbortsBeforeUpdateAndWritesNothing) {
  const auto dir = fresh_dir("abort");
  const auto c = tiny_config();
  const auto ds = load_run_dataset(c);
  TrainOptions opt;
  opt.output_dir = dir / "run";
  opt.gradient_hook = [](int epoch, std::size_t batch, ModelParams<float>& g) {
    if (epoch == 1 && batch == 1) g.head.bias[0] = std::numeric_limits<float>::quiet_NaN();
  };
  try {
    train_run(c, ds, opt);
    FAIL() << "NaN gradient did not abort";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.epoch(), 1);
    EXPECT_EQ(e.batch(), 1u);
    EXPECT_NE(e.where().find("head"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(dir / "run" / "checkpoint.spck"));
  EXPECT_FALSE(fs::exists(dir / "run" / "result.json"));
}

TEST(Train, WritesCheckpointAndResult) {
  const auto dir = fresh_dir("train_out");
  const auto c = tiny_config();
  TrainOptions opt;
  opt.output_dir = dir;
  const auto r = train_run(c, load_run_dataset(c), opt);
  ASSERT_TRUE(fs::exists(dir / "checkpoint.spck"));
  const auto j = nlohmann::json::parse(read_file(dir / "result.json"));
  EXPECT_EQ(ExperimentResult::from_json(j).fingerprint, r.fingerprint);
  EXPECT_EQ(j["epochs"].size(), 2u);
  EXPECT_EQ(load_matching_result(dir, c)->test_accuracy, r.test_accuracy);
  auto other = c;
  other.epochs = 3;
  EXPECT_FALSE(load_matching_result(dir, other));
}

TEST(Ablation, GridHasNineCellsWithDistinctFingerprints) {
  const auto dir = fresh_dir("ablate");
  const auto c = tiny_config();
  AblateOptions opt;
  opt.seeds = {1};
  opt.output_dir = dir;
  const auto r = run_ablation(c, load_run_dataset(c), opt);
  write_ablation_outputs(r, dir);
  ASSERT_EQ(r.cells.size(), 9u);
  std::set<std::string> fps;
  for (const auto& cell : r.cells) {
    fps.insert(cell.fingerprint);
    EXPECT_EQ(cell.runs.size(), 1u);
  }
  EXPECT_EQ(fps.size(), 9u);
  EXPECT_EQ(r.failure_count(), 0u);
  const auto md = read_file(dir / "ablation.md");
  EXPECT_NE(md.find("| Average | Max | Dynamic Outlier |"), std::string::npos);
  for (auto b : ablation_rows()) {
    const auto row = display_name(b);
    EXPECT_NE(md.find(row), std::string::npos) << row;
  }
  EXPECT_EQ(count_lines(read_file(dir / "ablation.csv")), 10u);

  // A second pass reuses every result.json.
  const auto again = run_ablation(c, load_run_dataset(c), opt);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(again.cells[i].runs[0].wall_clock_seconds, r.cells[i].runs[0].wall_clock_seconds);
  }
}

TEST(Ablation, FailedCellsAreRecordedAndOthersContinue) {
  auto c = tiny_config();
  c.model.branch.local_crop_size = 2;  // too small for two downsampling blocks
  AblateOptions opt;
  opt.seeds = {1};
  const auto r = run_ablation(c, load_run_dataset(c), opt);
  for (const auto& cell : r.cells) {
    if (cell.branch == BranchKind::GlobalOnly) {
      EXPECT_EQ(cell.runs.size(), 1u);
    } else {
      EXPECT_TRUE(cell.runs.empty());
      EXPECT_EQ(cell.failures.size(), 1u);
    }
  }
  EXPECT_NE(r.markdown().find("failed"), std::string::npos);
}

TEST(Convergence, CsvHasOneRowPerEpochPlusHeaderAndSummary) {
  const auto dir = fresh_dir("conv");
  auto c = tiny_config();
  c.epochs = 3;
  ConvergenceOptions opt;
  opt.seeds = {1, 2};
  opt.output_dir = dir;
  const auto r = run_convergence(c, load_run_dataset(c), opt);
  ASSERT_EQ(r.runs.size(), 2u);
  EXPECT_EQ(count_lines(read_file(dir / "convergence-seed-1.csv")), 5u);
  EXPECT_TRUE(fs::exists(dir / "convergence-seed-2.svg"));
  EXPECT_EQ(count_lines(read_file(dir / "convergence.csv")), 3u);
  EXPECT_LE(r.dynamic_not_slower(), 2u);
}

TEST(Convergence, DynamicFirstEpochMatchesAverage) {
  auto c = tiny_config();
  const auto ds = load_run_dataset(c);
  c.model.branch.pool_mode = PoolMode::dynamic();
  const auto dyn = train_run(c, ds);
  c.model.branch.pool_mode = PoolMode::average();
  const auto avg = train_run(c, ds);
  EXPECT_NEAR(dyn.epochs[0].train_loss, avg.epochs[0].train_loss, 1e-6);
  EXPECT_EQ(dyn.epochs[0].w1, 1.0);
  EXPECT_EQ(dyn.epochs[0].w2, 1.0);
}

TEST(Convergence, EpochsToFraction) {
  std::vector<EpochRecord> e(4);
  e[0].train_accuracy = 0.2;
  e[1].train_accuracy = 0.5;
  e[2].train_accuracy = 0.9;
  e[3].train_accuracy = 0.8;
  EXPECT_EQ(epochs_to_fraction(e), 3);  // 0.72 target
  e[3].train_accuracy = 0.0;
  EXPECT_EQ(epochs_to_fraction(e), 1);
  EXPECT_THROW(epochs_to_fraction({}), Error);
}

TEST(Report, EmptyDirectoryGivesEmptyTable) {
  const auto dir = fresh_dir("report_empty");
  const auto r = build_report(dir);
  EXPECT_EQ(r.results, 0u);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_NE(r.markdown.find("Crop strategy"), std::string::npos);
  EXPECT_THROW(build_report(dir / "missing"), IoError);
}

TEST(Report, SkipsMalformedFilesAndFlagsFingerprintMismatch) {
  const auto dir = fresh_dir("report");
  auto c = tiny_config();
  c.model.branch.kind = BranchKind::GlobalOnly;
  const auto ds = load_run_dataset(c);
  TrainOptions opt;
  opt.output_dir = dir / "a";
  train_run(c, ds, opt);
  c.seed = 2;
  c.sgd.learning_rate = 0.02;
  opt.output_dir = dir / "b";
  train_run(c, ds, opt);
  std::ofstream(dir / "broken.json") << "{\"fingerprint\": ";
  auto bad = nlohmann::json::parse(read_file(dir / "a" / "result.json"));
  bad["test_accuracy"] = 7.0;
  std::ofstream(dir / "bad_acc.json") << bad.dump();

  const auto r = build_report(dir);
  EXPECT_EQ(r.results, 2u);
  std::size_t skipped = 0, mismatch = 0;
  for (const auto& w : r.warnings) {
    skipped += w.find("skipping") != std::string::npos;
    mismatch += w.find("fingerprint mismatch") != std::string::npos;
  }
  EXPECT_EQ(skipped, 2u);
  EXPECT_EQ(mismatch, 1u);
  EXPECT_NE(r.markdown.find("(n=2)"), std::string::npos);
}

TEST(Gradcheck, PoolingScopePassesAndJsonIsValid) {
  GradcheckOptions opt;
  opt.only = "pooling";
  const auto rep = run_gradcheck(opt);
  EXPECT_TRUE(rep.passed());
  const auto j = nlohmann::json::parse(rep.to_json().dump());
  EXPECT_TRUE(j["passed"].get<bool>());
  for (const auto& [op, summary] : j["operators"].items()) {
    EXPECT_GE(summary["trials"].get<std::size_t>(), 20u) << op;
  }
}

TEST(Gradcheck, CorruptedGradientIsCaught) {
  GradcheckOptions opt;
  opt.only = "pooling";
  opt.trials = 3;
  opt.corrupt = [](const std::string& op, std::span<double> g) {
    if (op == "pool_outlier") g[0] += 1.0;
  };
  const auto rep = run_gradcheck(opt);
  EXPECT_FALSE(rep.passed());
  for (const auto& c : rep.cases) EXPECT_EQ(c.passed, c.op != "pool_outlier") << c.op;
}
