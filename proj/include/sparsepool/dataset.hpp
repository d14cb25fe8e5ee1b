#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsepool/error.hpp"
#include "sparsepool/image.hpp"
#include "sparsepool/model.hpp"
#include "sparsepool/synth.hpp"

namespace sparsepool {

namespace fs = std::filesystem;

struct Record {
  std::string path;  // relative to the dataset root, or a synth:// reference
  int label = 0;
  Split split = Split::Train;
  std::optional<std::string> plot;
  std::optional<std::string> date;
};

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  nlohmann::json to_json() const { return {{"mean", mean}, {"std", stddev}}; }

  static Normalization from_json(const nlohmann::json& j) {
    Normalization n;
    n.mean = j.at("mean").get<std::vector<double>>();
    n.stddev = j.at("std").get<std::vector<double>>();
    if (n.mean.size() != n.stddev.size()) throw IoError("normalization: size mismatch");
    return n;
  }
};

struct DatasetIndex {
  std::vector<std::string> classes;  // label -> class name
  std::vector<Record> records;

  std::vector<std::size_t> ids(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split == split) out.push_back(i);
    }
    return out;
  }

  std::size_t count(Split split) const { return ids(split).size(); }
};

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

// Every (class, plot) pair must belong to exactly one split.
inline void check_plot_disjoint(const DatasetIndex& index) {
  std::map<std::pair<int, std::string>, Split> seen;
  for (const auto& r : index.records) {
    if (!r.plot) continue;
    const auto key = std::make_pair(r.label, *r.plot);
    auto [it, inserted] = seen.emplace(key, r.split);
    if (!inserted && it->second != r.split) {
      throw ConfigError("split leakage: class '" +
                        index.classes[static_cast<std::size_t>(r.label)] + "' plot '" +
                        *r.plot + "' appears in both train and test");
    }
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".png" || ext == ".PNG" || ext == ".spt4";
}

}  // namespace detail

// Manifest CSV with header path,class,plot,split (plot may be empty).
inline DatasetIndex read_manifest(const fs::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw IoError("cannot open manifest " + manifest.string());
  std::string line;
  std::getline(is, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,class,plot,split") {
    throw ConfigError("manifest header must be 'path,class,plot,split', got '" + line + "'");
  }
  struct Row {
    std::string path, cls, plot;
    Split split;
  };
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 4) {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": expected 4 columns");
    }
    rows.push_back({cells[0], cells[1], cells[2], parse_split(cells[3])});
  }
  // Class vocabulary comes from the training split; test-only classes are
  // unknown and rejected.
  std::set<std::string> names;
  for (const auto& r : rows) {
    if (r.split == Split::Train) names.insert(r.cls);
  }
  DatasetIndex index;
  index.classes.assign(names.begin(), names.end());
  for (const auto& r : rows) {
    const auto it = std::find(index.classes.begin(), index.classes.end(), r.cls);
    if (it == index.classes.end()) {
      throw ConfigError("unknown class '" + r.cls + "' (no training images)");
    }
    Record rec;
    rec.path = r.path;
    rec.label = static_cast<int>(std::distance(index.classes.begin(), it));
    rec.split = r.split;
    if (!r.plot.empty()) rec.plot = r.plot;
    index.records.push_back(std::move(rec));
  }
  check_plot_disjoint(index);
  return index;
}

inline void write_manifest(const fs::path& manifest, const DatasetIndex& index) {
  std::ofstream os(manifest);
  if (!os) throw IoError("cannot write manifest " + manifest.string());
  os << "path,class,plot,split\n";
  for (const auto& r : index.records) {
    os << r.path << ',' << index.classes[static_cast<std::size_t>(r.label)] << ','
       << r.plot.value_or("") << ',' << to_string(r.split) << '\n';
  }
}

// Builds an index from root/<split>/<class>/<image> or, when given, from a
// manifest CSV whose paths are relative to root.
inline DatasetIndex ingest_folder(const fs::path& root,
                                  const std::optional<fs::path>& manifest = std::nullopt) {
  if (manifest) return read_manifest(*manifest);
  if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  std::map<Split, std::map<std::string, std::vector<std::string>>> layout;
  for (Split split : {Split::Train, Split::Test}) {
    const fs::path dir = root / to_string(split);
    if (!fs::is_directory(dir)) throw IoError("missing split directory " + dir.string());
    for (const auto& cls : fs::directory_iterator(dir)) {
      if (!cls.is_directory()) continue;
      auto& files = layout[split][cls.path().filename().string()];
      for (const auto& f : fs::directory_iterator(cls.path())) {
        if (f.is_regular_file() && detail::is_image_file(f.path())) {
          files.push_back(fs::relative(f.path(), root).generic_string());
        }
      }
      std::sort(files.begin(), files.end());
    }
  }
  DatasetIndex index;
  for (const auto& [name, files] : layout[Split::Train]) index.classes.push_back(name);
  for (Split split : {Split::Train, Split::Test}) {
    for (const auto& [name, files] : layout[split]) {
      const auto it = std::find(index.classes.begin(), index.classes.end(), name);
      if (it == index.classes.end()) {
        throw ConfigError("unknown class directory '" + name + "' in " + to_string(split));
      }
      for (const auto& f : files) {
        Record r;
        r.path = f;
        r.label = static_cast<int>(std::distance(index.classes.begin(), it));
        r.split = split;
        index.records.push_back(std::move(r));
      }
    }
  }
  return index;
}

// ---------------------------------------------------------------------------
// In-memory dataset with payloads and normalization.

struct Dataset {
  DatasetIndex index;
  std::vector<Image> images;  // parallel to index.records, normalized
  Normalization norm;

  std::size_t num_classes() const { return index.classes.size(); }
  int label(std::size_t id) const { return index.records[id].label; }
};

// Per-channel mean and population std over every pixel of the training split.
inline Normalization compute_normalization(const DatasetIndex& index,
                                           const std::vector<Image>& images) {
  const auto train = index.ids(Split::Train);
  if (train.empty()) throw ConfigError("normalization needs training images");
  const std::size_t channels = images[train.front()].channels;
  Normalization n;
  n.mean.assign(channels, 0.0);
  n.stddev.assign(channels, 0.0);
  std::vector<double> count(channels, 0.0);
  for (auto id : train) {
    const Image& img = images[id];
    const std::size_t plane = img.height * img.width;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < plane; ++i) n.mean[c] += img.data[c * plane + i];
      count[c] += static_cast<double>(plane);
    }
  }
  for (std::size_t c = 0; c < channels; ++c) n.mean[c] /= count[c];
  for (auto id : train) {
    const Image& img = images[id];
    const std::size_t plane = img.height * img.width;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = img.data[c * plane + i] - n.mean[c];
        n.stddev[c] += d * d;
      }
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    n.stddev[c] = std::sqrt(n.stddev[c] / count[c]);
    if (n.stddev[c] == 0.0) n.stddev[c] = 1.0;
  }
  return n;
}

inline void apply_normalization(Image& img, const Normalization& n) {
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c) {
    const double m = n.mean[c], s = n.stddev[c];
    for (std::size_t i = 0; i < plane; ++i) {
      float& v = img.data[c * plane + i];
      v = static_cast<float>((v - m) / s);
    }
  }
}

inline Dataset make_dataset(DatasetIndex index, std::vector<Image> raw) {
  Dataset ds;
  ds.norm = compute_normalization(index, raw);
  for (auto& img : raw) apply_normalization(img, ds.norm);
  ds.index = std::move(index);
  ds.images = std::move(raw);
  return ds;
}

inline Dataset load_dataset(const fs::path& root, const DatasetIndex& index) {
  std::vector<Image> raw;
  raw.reserve(index.records.size());
  for (const auto& r : index.records) raw.push_back(read_image(root / r.path));
  return make_dataset(index, std::move(raw));
}

inline Dataset dataset_from_synth(const SynthDataset& synth) {
  DatasetIndex index;
  for (std::size_t k = 0; k < synth.spec.num_classes; ++k) {
    index.classes.push_back("class" + std::to_string(k));
  }
  std::vector<Image> raw;
  for (Split split : {Split::Train, Split::Test}) {
    const auto& samples = split == Split::Train ? synth.train : synth.test;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      Record r;
      r.path = "synth://" + to_string(split) + "/" + std::to_string(i);
      r.label = samples[i].label;
      r.split = split;
      index.records.push_back(std::move(r));
      raw.push_back(samples[i].image);
    }
  }
  return make_dataset(std::move(index), std::move(raw));
}

// Writes images and index.csv (plus normalization.json) under root. Each
// class gets one plot per split so the dump satisfies plot-disjointness.
inline DatasetIndex dump_synth(const SynthDataset& synth, const fs::path& root,
                               const std::string& ext = ".png") {
  DatasetIndex index;
  std::vector<Image> raw;
  for (std::size_t k = 0; k < synth.spec.num_classes; ++k) {
    index.classes.push_back("class" + std::to_string(k));
  }
  for (Split split : {Split::Train, Split::Test}) {
    const auto& samples = split == Split::Train ? synth.train : synth.test;
    std::vector<std::size_t> counter(synth.spec.num_classes, 0);
    for (const auto& s : samples) {
      const auto& cls = index.classes[static_cast<std::size_t>(s.label)];
      const fs::path rel = fs::path(to_string(split)) / cls /
                           (std::to_string(counter[static_cast<std::size_t>(s.label)]++) + ext);
      fs::create_directories((root / rel).parent_path());
      write_image(root / rel, s.image);
      Record r;
      r.path = rel.generic_string();
      r.label = s.label;
      r.split = split;
      r.plot = cls + (split == Split::Train ? "-A" : "-B");
      index.records.push_back(r);
      raw.push_back(s.image);
    }
  }
  write_manifest(root / "index.csv", index);
  std::ofstream(root / "normalization.json")
      << compute_normalization(index, raw).to_json().dump(2) << "\n";
  return index;
}

// ---------------------------------------------------------------------------
// Batch assembly

template <typename T>
struct Batch {
  ModelInput<T> input;
  std::vector<int> labels;
};

// Assembles model inputs for the given records following one crop plan per
// record. Resized copies are cached per target size since every plan of a
// run resizes the same image to the same size.
class BatchLoader {
 public:
  explicit BatchLoader(const Dataset& ds) : ds_(&ds) {}

  template <typename T>
  Batch<T> load(std::span<const std::size_t> ids, std::span<const CropPlan> plans) {
    if (ids.size() != plans.size()) throw ShapeError("load_batch: one plan per image");
    if (ids.empty()) throw ShapeError("load_batch: empty batch");
    Batch<T> b;
    const std::size_t n = ids.size();
    const std::size_t channels = ds_->images[ids.front()].channels;
    const CropPlan& first = plans.front();
    if (first.has_global) {
      b.input.global = Tensor4<T>(
          Shape4{n, channels, first.global_crop.size, first.global_crop.size});
    }
    if (first.has_local) {
      const std::size_t s = first.local_crops.front().size;
      b.input.crops.assign(first.local_crops.size(), Tensor4<T>(Shape4{n, channels, s, s}));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t id = ids[i];
      const CropPlan& plan = plans[i];
      b.labels.push_back(ds_->label(id));
      if (plan.has_global) {
        Image g = crop(resized(id, plan.global_resized), plan.global_crop);
        if (plan.flip_horizontal) g = flip_horizontal(g);
        if (plan.flip_vertical) g = flip_vertical(g);
        write_into(b.input.global, i, g);
      }
      if (plan.has_local) {
        const Image& src = resized(id, plan.local_resized);
        for (std::size_t k = 0; k < plan.local_crops.size(); ++k) {
          write_into(b.input.crops[k], i, crop(src, plan.local_crops[k]));
        }
      }
    }
    return b;
  }

 private:
  const Image& resized(std::size_t id, ImageSize size) {
    const Image& src = ds_->images[id];
    if (src.size() == size) return src;
    auto& slot = cache_[{size.width, size.height}];
    if (slot.size() != ds_->images.size()) slot.resize(ds_->images.size());
    if (slot[id].data.empty()) slot[id] = resize_bilinear(src, size.width, size.height);
    return slot[id];
  }

  const Dataset* ds_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<Image>> cache_;
};

}  // namespace sparsepool
