#pragma once

// SPCK model checkpoint:
//   "SPCK" | version u16 | branch kind u8 | entry count u32
//   per entry: branch tag u8 | layer tag u8 | is_bias u8 | ndims u8 | dims u32...
//   payloads in manifest order, f32 little-endian.

#include <filesystem>
#include <fstream>
#include <vector>

#include "sparsepool/model.hpp"
#include "sparsepool/spt4.hpp"

namespace sparsepool {

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'P', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void write_checkpoint(std::ostream& os, Model<T>& model) {
  std::vector<ParamView<T>> views;
  for_each_param<T>(model.params, [&](const ParamView<T>& v) { views.push_back(v); });
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  le::put<std::uint16_t>(os, kCheckpointVersion);
  le::put<std::uint8_t>(os, static_cast<std::uint8_t>(model.spec.branch.kind));
  le::put<std::uint32_t>(os, static_cast<std::uint32_t>(views.size()));
  for (const auto& v : views) {
    le::put<std::uint8_t>(os, static_cast<std::uint8_t>(v.branch));
    le::put<std::uint8_t>(os, static_cast<std::uint8_t>(v.layer));
    le::put<std::uint8_t>(os, v.is_bias ? 1 : 0);
    le::put<std::uint8_t>(os, static_cast<std::uint8_t>(v.dims.size()));
    for (auto d : v.dims) le::put<std::uint32_t>(os, d);
  }
  for (const auto& v : views) {
    for (T x : v.values) le::put_f32(os, static_cast<float>(x));
  }
  if (!os) throw IoError("failed writing checkpoint");
}

// Loads parameters into a model built from the matching spec; the stored
// manifest must agree entry by entry with the model's own.
template <typename T>
void read_checkpoint(std::istream& is, Model<T>& model) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw IoError("not a checkpoint (bad magic)");
  if (le::get<std::uint16_t>(is) != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version");
  }
  if (le::get<std::uint8_t>(is) != static_cast<std::uint8_t>(model.spec.branch.kind)) {
    throw IoError("checkpoint branch kind does not match the model");
  }
  std::vector<ParamView<T>> views;
  for_each_param<T>(model.params, [&](const ParamView<T>& v) { views.push_back(v); });
  if (le::get<std::uint32_t>(is) != views.size()) {
    throw IoError("checkpoint manifest length does not match the model");
  }
  for (const auto& v : views) {
    const bool ok = le::get<std::uint8_t>(is) == static_cast<std::uint8_t>(v.branch) &&
                    le::get<std::uint8_t>(is) == static_cast<std::uint8_t>(v.layer) &&
                    le::get<std::uint8_t>(is) == (v.is_bias ? 1 : 0);
    const auto ndims = le::get<std::uint8_t>(is);
    std::vector<std::uint32_t> dims(ndims);
    for (auto& d : dims) d = le::get<std::uint32_t>(is);
    if (!ok || dims != v.dims) throw IoError("checkpoint manifest entry mismatch");
  }
  for (auto& v : views) {
    for (T& x : v.values) x = static_cast<T>(le::get_f32(is));
  }
  ++model.version;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_checkpoint(os, model);
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, Model<T>& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  read_checkpoint(is, model);
}

}  // namespace sparsepool
