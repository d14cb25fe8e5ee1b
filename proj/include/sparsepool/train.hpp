#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsepool/checkpoint.hpp"
#include "sparsepool/config.hpp"
#include "sparsepool/dataset.hpp"
#include "sparsepool/layers.hpp"
#include "sparsepool/model.hpp"
#include "sparsepool/synth.hpp"

namespace sparsepool {

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  // Fraction of (image, channel) pairs whose outlier set was empty.
  double fallback_rate = 0.0;
  double w1 = 1.0;
  double w2 = 1.0;

  bool operator==(const EpochRecord&) const = default;
};

struct ExperimentResult {
  std::string fingerprint;
  std::uint64_t seed = 0;
  BranchKind branch = BranchKind::MultiRes;
  PoolMode pool;
  std::vector<EpochRecord> epochs;
  double test_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  double wall_clock_seconds = 0.0;
  std::string config;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["fingerprint"] = fingerprint;
    j["seed"] = seed;
    j["branch"] = to_string(branch);
    j["pool"] = to_string(pool.kind);
    j["lambda"] = pool.lambda;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : epochs) {
      j["epochs"].push_back({{"epoch", e.epoch},
                             {"train_loss", e.train_loss},
                             {"train_accuracy", e.train_accuracy},
                             {"fallback_rate", e.fallback_rate},
                             {"w1", e.w1},
                             {"w2", e.w2}});
    }
    j["test_accuracy"] = test_accuracy;
    j["per_class_accuracy"] = per_class_accuracy;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["config"] = config;
    return j;
  }

  static ExperimentResult from_json(const nlohmann::json& j) {
    ExperimentResult r;
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.branch = parse_branch_kind(j.at("branch").get<std::string>());
    r.pool.kind = parse_pool_kind(j.at("pool").get<std::string>());
    r.pool.lambda = j.at("lambda").get<double>();
    for (const auto& e : j.at("epochs")) {
      r.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                          e.at("train_accuracy").get<double>(),
                          e.at("fallback_rate").get<double>(), e.at("w1").get<double>(),
                          e.at("w2").get<double>()});
    }
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
    r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
    r.config = j.value("config", std::string());
    return r;
  }
};

// Raised when training hits a non-finite loss or gradient.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(int epoch, std::size_t batch, std::string where, const std::string& why)
      : NumericError("training aborted at epoch " + std::to_string(epoch) + ", batch " +
                     std::to_string(batch) + ", " + where + ": " + why),
        epoch_(epoch),
        batch_(batch),
        where_(std::move(where)) {}

  int epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }
  const std::string& where() const { return where_; }

 private:
  int epoch_;
  std::size_t batch_;
  std::string where_;
};

// Writes text to path via a temporary file and a rename.
inline void write_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << text;
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Dataset load_run_dataset(const RunConfig& config) {
  if (config.data.source == DataSource::Synth) {
    return dataset_from_synth(generate(config.data.synth));
  }
  std::optional<std::filesystem::path> manifest;
  if (!config.data.manifest.empty()) manifest = config.data.manifest;
  const auto index = ingest_folder(config.data.folder, manifest);
  return load_dataset(config.data.folder, index);
}

inline std::string param_name(const ParamView<float>& v, std::size_t layer_index) {
  const char* branch = v.branch == BranchTag::Global  ? "global trunk"
                       : v.branch == BranchTag::Local ? "local trunk"
                                                      : "head";
  return std::string(branch) + (v.layer == LayerTag::Conv ? " conv " : " dense ") +
         std::to_string(layer_index) + (v.is_bias ? " bias" : " weight");
}

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
};

// Test-time evaluation: center/quadrant crops, no flips.
inline EvalResult evaluate(const Model<float>& model, const Dataset& ds, BatchLoader& loader,
                           std::optional<Schedule> schedule, std::size_t batch_size) {
  const auto ids = ds.index.ids(Split::Test);
  std::vector<std::size_t> correct(ds.num_classes(), 0), total(ds.num_classes(), 0);
  ModelCache<float> cache;
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    const std::size_t end = std::min(ids.size(), start + batch_size);
    std::vector<std::size_t> batch_ids(ids.begin() + start, ids.begin() + end);
    std::vector<CropPlan> plans;
    for (auto id : batch_ids) {
      plans.push_back(make_crop_plan(ds.images[id].size(), model.spec.branch, CropMode::Test, 0));
    }
    const auto batch = loader.load<float>(batch_ids, plans);
    const auto logits = model_forward(model, batch.input, schedule, cache);
    for (std::size_t i = 0; i < batch_ids.size(); ++i) {
      const auto row = logits.row(i);
      const auto pred = std::distance(row.begin(), std::max_element(row.begin(), row.end()));
      const auto label = static_cast<std::size_t>(batch.labels[i]);
      total[label] += 1;
      correct[label] += static_cast<std::size_t>(pred) == label;
    }
  }
  EvalResult r;
  std::size_t c = 0, t = 0;
  for (std::size_t k = 0; k < total.size(); ++k) {
    r.per_class_accuracy.push_back(total[k] ? static_cast<double>(correct[k]) / total[k] : 0.0);
    c += correct[k];
    t += total[k];
  }
  r.accuracy = t ? static_cast<double>(c) / static_cast<double>(t) : 0.0;
  return r;
}

struct TrainOptions {
  // Output directory for checkpoint.spck and result.json; nothing is written
  // when empty.
  std::filesystem::path output_dir;
  // Called after each backward pass, before the update; lets tests inject
  // faults into the gradients.
  std::function<void(int epoch, std::size_t batch, ModelParams<float>& grads)> gradient_hook;
  std::function<void(const EpochRecord&)> on_epoch;
};

// The dataset must be the one load_run_dataset(config) produces; passing it
// in lets grids share one generated dataset.
inline ExperimentResult train_run(const RunConfig& config_in, const Dataset& ds,
                                  const TrainOptions& options = {}) {
  const auto started = std::chrono::steady_clock::now();
  RunConfig config = config_in;
  config.model.num_classes = ds.num_classes();
  config.sgd.seed = config.seed;
  config.validate();

  Model<float> model =
      Model<float>::create(config.model, detail::derive_seed({config.seed, 0x1a17}));
  std::vector<std::vector<float>> velocity;
  for_each_param<float>(model.params, [&](const ParamView<float>& v) {
    velocity.emplace_back(v.values.size(), 0.0f);
  });

  BatchLoader loader(ds);
  auto order = ds.index.ids(Split::Train);
  const bool dynamic = config.model.branch.pool_mode.kind == PoolKind::DynamicOutlier;

  ExperimentResult result;
  result.fingerprint = fingerprint(config);
  result.seed = config.seed;
  result.branch = config.model.branch.kind;
  result.pool = config.model.branch.pool_mode;
  result.config = serialize(config);

  ModelCache<float> cache;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const Schedule schedule{epoch, config.epochs};
    const auto e64 = static_cast<std::uint64_t>(epoch);
    std::mt19937_64 shuffle_rng(detail::derive_seed({config.seed, 0x5f, e64}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0, empty_sets = 0, pairs = 0, batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<std::size_t> ids(order.begin() + start, order.begin() + end);
      std::vector<CropPlan> plans;
      for (auto id : ids) {
        plans.push_back(make_crop_plan(
            ds.images[id].size(), config.model.branch, CropMode::Train,
            detail::derive_seed({config.seed, 0xc7, e64, id})));
      }
      const auto batch = loader.load<float>(ids, plans);
      const auto logits = model_forward(model, batch.input, schedule, cache);
      XentResult<float> xent;
      try {
        xent = softmax_xent(logits, batch.labels);
      } catch (const NumericError& e) {
        throw TrainingAborted(epoch, batch_index, "loss", e.what());
      }
      auto grads = model_backward(model, xent.grad_logits, cache);
      if (options.gradient_hook) options.gradient_hook(epoch, batch_index, grads);

      // Validate every gradient before touching any parameter.
      std::vector<std::span<float>> grad_views;
      std::size_t layer_index = 0;
      for_each_param<float>(grads, [&](const ParamView<float>& v) {
        if (!all_finite<float>(v.values)) {
          throw TrainingAborted(epoch, batch_index, param_name(v, layer_index / 2),
                                "non-finite gradient");
        }
        grad_views.push_back(v.values);
        ++layer_index;
      });
      std::size_t k = 0;
      for_each_param<float>(model.params, [&](const ParamView<float>& v) {
        sgd_step<float>(v.values, grad_views[k], velocity[k], config.sgd);
        ++k;
      });
      ++model.version;

      loss_sum += xent.loss * static_cast<double>(ids.size());
      correct += xent.correct;
      seen += ids.size();
      if (config.model.branch.pool_mode.uses_threshold()) {
        if (cache.global_dim) {
          empty_sets += cache.global_pool.empty_outlier_sets();
          pairs += cache.global_pool.pairs();
        }
        if (cache.local_dim) {
          empty_sets += cache.local_pool.pool.empty_outlier_sets();
          pairs += cache.local_pool.pool.pairs();
        }
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    rec.fallback_rate = pairs ? static_cast<double>(empty_sets) / static_cast<double>(pairs) : 0.0;
    if (dynamic) {
      const auto w = schedule.weights();
      rec.w1 = w.w1;
      rec.w2 = w.w2;
    }
    result.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }

  // Evaluation uses the weights after the last completed epoch: (2, 0).
  const auto eval = evaluate(model, ds, loader, Schedule{config.epochs, config.epochs},
                             config.batch_size);
  result.test_accuracy = eval.accuracy;
  result.per_class_accuracy = eval.per_class_accuracy;
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(options.output_dir);
    std::ostringstream ck;
    write_checkpoint(ck, model);
    write_atomic(options.output_dir / "checkpoint.spck", ck.str());
    write_atomic(options.output_dir / "result.json", result.to_json().dump(2) + "\n");
  }
  return result;
}

inline ExperimentResult train_run(const RunConfig& config, const TrainOptions& options = {}) {
  return train_run(config, load_run_dataset(config), options);
}

}  // namespace sparsepool
