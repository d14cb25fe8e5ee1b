#pragma once

// Run configuration file: INI-style sections [data], [model], [pool], [train].
//
//   [data]   source = synth | folder; folder, manifest (folder source);
//            synthetic generator fields (num_classes, train_per_class, ...)
//   [model]  branch = global | local | multires; global_input_size;
//            local_crop_size; trunk_widths = comma separated list
//   [pool]   mode = avg | max | outlier | dynamic; lambda
//   [train]  epochs; batch_size; learning_rate; momentum; seed; output_dir
//
// serialize() emits every key in a fixed order, so equal configs produce
// equal text and the fingerprint is a hash of that text (without seed and
// output_dir, which do not change what a run computes).

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sparsepool/error.hpp"
#include "sparsepool/layers.hpp"
#include "sparsepool/model.hpp"
#include "sparsepool/synth.hpp"

namespace sparsepool {

enum class DataSource { Synth, Folder };

struct DataConfig {
  DataSource source = DataSource::Synth;
  std::string folder;
  std::string manifest;
  SynthSpec synth;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  DataConfig data;
  ModelSpec model;
  int epochs = 20;
  std::size_t batch_size = 32;
  SgdConfig sgd;
  std::uint64_t seed = 1;
  std::string output_dir = "runs";

  void validate() const {
    if (data.source == DataSource::Synth) data.synth.validate();
    if (data.source == DataSource::Folder && data.folder.empty()) {
      throw ConfigError("[data] folder is required when source = folder");
    }
    model.validate();
    if (epochs < 1) throw ConfigError("[train] epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("[train] batch_size must be >= 1");
    sgd.validate();
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename N>
N parse_number(const std::string& section, const std::string& key, const std::string& text) {
  N value{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, value);
  if (r.ec != std::errc() || r.ptr != end) {
    throw ConfigError("[" + section + "] " + key + ": cannot parse '" + text + "'");
  }
  return value;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    out.push_back(parse_number<std::size_t>("model", "trunk_widths", item));
  }
  return out;
}

inline std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

}  // namespace detail

inline std::string serialize(const RunConfig& c, bool include_run_identity = true) {
  using detail::fmt_double;
  const auto& s = c.data.synth;
  const auto& b = c.model.branch;
  std::ostringstream os;
  os << "[data]\n"
     << "source = " << (c.data.source == DataSource::Synth ? "synth" : "folder") << "\n"
     << "folder = " << c.data.folder << "\n"
     << "manifest = " << c.data.manifest << "\n"
     << "num_classes = " << s.num_classes << "\n"
     << "train_per_class = " << s.train_per_class << "\n"
     << "test_per_class = " << s.test_per_class << "\n"
     << "image_size = " << s.image_size << "\n"
     << "blob_min = " << s.blob_min << "\n"
     << "blob_max = " << s.blob_max << "\n"
     << "blob_size = " << s.blob_size << "\n"
     << "visibility = " << fmt_double(s.visibility) << "\n"
     << "texture_scale = " << fmt_double(s.texture_scale) << "\n"
     << "texture_contrast = " << fmt_double(s.texture_contrast) << "\n"
     << "pixel_noise = " << fmt_double(s.pixel_noise) << "\n"
     << "blob_alpha = " << fmt_double(s.blob_alpha) << "\n"
     << "stripe_period = " << s.stripe_period << "\n"
     << "clutter_patches = " << s.clutter_patches << "\n"
     << "decoy_blobs = " << s.decoy_blobs << "\n"
     << "background_tint = " << fmt_double(s.background_tint) << "\n"
     << "seed = " << s.seed << "\n\n"
     << "[model]\n"
     << "branch = " << to_string(b.kind) << "\n"
     << "global_input_size = " << b.global_input_size << "\n"
     << "local_crop_size = " << b.local_crop_size << "\n"
     << "trunk_widths = " << detail::join(c.model.trunk_widths) << "\n\n"
     << "[pool]\n"
     << "mode = " << to_string(b.pool_mode.kind) << "\n"
     << "lambda = " << fmt_double(b.pool_mode.lambda) << "\n\n"
     << "[train]\n"
     << "epochs = " << c.epochs << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "learning_rate = " << fmt_double(c.sgd.learning_rate) << "\n"
     << "momentum = " << fmt_double(c.sgd.momentum) << "\n";
  if (include_run_identity) {
    os << "seed = " << c.seed << "\n"
       << "output_dir = " << c.output_dir << "\n";
  }
  return os.str();
}

// Stable identity of what a run computes, shared by all seeds of one setup.
inline std::string fingerprint(const RunConfig& c) {
  return detail::sha256_hex(serialize(c, false)).substr(0, 16);
}

// Desk-scale defaults used by the CLI, config files and the acceptance suite.
// Keys missing from a config file keep these values.
inline RunConfig default_config() {
  RunConfig c;
  auto& s = c.data.synth;
  s.blob_min = 2;
  s.blob_max = 3;
  s.visibility = 1.0;
  s.decoy_blobs = 1;
  s.background_tint = 0.8;
  c.model.num_classes = s.num_classes;
  c.model.trunk_widths = {8, 16};
  c.model.branch.global_input_size = 32;
  c.model.branch.local_crop_size = 32;
  c.model.branch.pool_mode.lambda = 0.5;
  c.sgd.seed = c.seed;
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }

  static const std::map<std::string, std::set<std::string>> known{
      {"data",
       {"source", "folder", "manifest", "num_classes", "train_per_class", "test_per_class",
        "image_size", "blob_min", "blob_max", "blob_size", "visibility", "texture_scale",
        "texture_contrast", "pixel_noise", "blob_alpha", "stripe_period", "clutter_patches",
        "decoy_blobs", "background_tint", "seed"}},
      {"model", {"branch", "global_input_size", "local_crop_size", "trunk_widths"}},
      {"pool", {"mode", "lambda"}},
      {"train", {"epochs", "batch_size", "learning_rate", "momentum", "seed", "output_dir"}}};
  for (const auto& [section, body] : tree) {
    const auto it = known.find(section);
    if (it == known.end()) throw ConfigError("unknown config section [" + section + "]");
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config key '" + section + "' outside a section");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) {
        throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      }
    }
  }

  RunConfig c = default_config();
  auto get = [&](const char* section, const char* key) -> std::optional<std::string> {
    const auto v = tree.get_optional<std::string>(pt::ptree::path_type(
        std::string(section) + "." + key, '.'));
    if (!v) return std::nullopt;
    return *v;
  };
  auto num = [&](const char* section, const char* key, auto& field) {
    if (auto v = get(section, key)) {
      field = detail::parse_number<std::decay_t<decltype(field)>>(section, key, *v);
    }
  };
  auto str = [&](const char* section, const char* key, std::string& field) {
    if (auto v = get(section, key)) field = *v;
  };

  if (auto v = get("data", "source")) {
    if (*v == "synth") {
      c.data.source = DataSource::Synth;
    } else if (*v == "folder") {
      c.data.source = DataSource::Folder;
    } else {
      throw ConfigError("[data] source must be synth or folder, got '" + *v + "'");
    }
  }
  str("data", "folder", c.data.folder);
  str("data", "manifest", c.data.manifest);
  auto& s = c.data.synth;
  num("data", "num_classes", s.num_classes);
  num("data", "train_per_class", s.train_per_class);
  num("data", "test_per_class", s.test_per_class);
  num("data", "image_size", s.image_size);
  num("data", "blob_min", s.blob_min);
  num("data", "blob_max", s.blob_max);
  num("data", "blob_size", s.blob_size);
  num("data", "visibility", s.visibility);
  num("data", "texture_scale", s.texture_scale);
  num("data", "texture_contrast", s.texture_contrast);
  num("data", "pixel_noise", s.pixel_noise);
  num("data", "blob_alpha", s.blob_alpha);
  num("data", "stripe_period", s.stripe_period);
  num("data", "clutter_patches", s.clutter_patches);
  num("data", "decoy_blobs", s.decoy_blobs);
  num("data", "background_tint", s.background_tint);
  num("data", "seed", s.seed);

  auto& b = c.model.branch;
  if (auto v = get("model", "branch")) b.kind = parse_branch_kind(*v);
  num("model", "global_input_size", b.global_input_size);
  num("model", "local_crop_size", b.local_crop_size);
  if (auto v = get("model", "trunk_widths")) c.model.trunk_widths = detail::parse_list(*v);
  if (auto v = get("pool", "mode")) b.pool_mode.kind = parse_pool_kind(*v);
  num("pool", "lambda", b.pool_mode.lambda);

  num("train", "epochs", c.epochs);
  num("train", "batch_size", c.batch_size);
  num("train", "learning_rate", c.sgd.learning_rate);
  num("train", "momentum", c.sgd.momentum);
  num("train", "seed", c.seed);
  str("train", "output_dir", c.output_dir);
  c.sgd.seed = c.seed;
  c.model.num_classes = s.num_classes;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace sparsepool
