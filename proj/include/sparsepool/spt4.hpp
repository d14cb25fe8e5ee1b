#pragma once

// SPT4 flat tensor file:
//   "SPT4" | version u16 | N,C,H,W u32 | dtype u8 (0 = f32, 1 = f64) | payload
// All integers and payload values are little-endian; payload is row-major.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <type_traits>

#include "sparsepool/error.hpp"
#include "sparsepool/tensor.hpp"

namespace sparsepool {

inline constexpr std::array<char, 4> kSpt4Magic{'S', 'P', 'T', '4'};
inline constexpr std::uint16_t kSpt4Version = 1;

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

namespace le {

template <typename U>
void put(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  }
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw IoError("unexpected end of file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return value;
}

inline void put_f32(std::ostream& os, float v) {
  put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
}
inline void put_f64(std::ostream& os, double v) {
  put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
}
inline float get_f32(std::istream& is) {
  return std::bit_cast<float>(get<std::uint32_t>(is));
}
inline double get_f64(std::istream& is) {
  return std::bit_cast<double>(get<std::uint64_t>(is));
}

}  // namespace le

template <typename T>
constexpr Dtype dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Dtype::F32 : Dtype::F64;
}

template <typename T>
void write_spt4(std::ostream& os, const Tensor4<T>& t) {
  const auto& s = t.shape();
  os.write(kSpt4Magic.data(), kSpt4Magic.size());
  le::put<std::uint16_t>(os, kSpt4Version);
  for (std::size_t d : {s.n, s.c, s.h, s.w}) {
    le::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  le::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) {
      le::put_f32(os, v);
    } else {
      le::put_f64(os, v);
    }
  }
  if (!os) throw IoError("failed writing SPT4 stream");
}

struct Spt4Tensor {
  Dtype dtype = Dtype::F64;
  Tensor4<double> tensor;  // f32 payloads are widened losslessly
};

inline Spt4Tensor read_spt4(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kSpt4Magic) throw IoError("not an SPT4 file (bad magic)");
  const auto version = le::get<std::uint16_t>(is);
  if (version != kSpt4Version) {
    throw IoError("unsupported SPT4 version " + std::to_string(version));
  }
  Shape4 s;
  s.n = le::get<std::uint32_t>(is);
  s.c = le::get<std::uint32_t>(is);
  s.h = le::get<std::uint32_t>(is);
  s.w = le::get<std::uint32_t>(is);
  const auto tag = le::get<std::uint8_t>(is);
  if (tag > 1) throw IoError("unknown SPT4 dtype tag " + std::to_string(tag));
  if (s.empty()) throw IoError("SPT4 tensor has a zero dimension: " + s.str());
  Spt4Tensor out;
  out.dtype = static_cast<Dtype>(tag);
  std::vector<double> values(s.size());
  for (auto& v : values) {
    v = out.dtype == Dtype::F32 ? static_cast<double>(le::get_f32(is))
                                : le::get_f64(is);
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw IoError("trailing bytes after SPT4 payload");
  }
  out.tensor = Tensor4<double>::from_values(s, std::move(values));
  return out;
}

template <typename T>
void save_spt4(const std::filesystem::path& path, const Tensor4<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_spt4(os, t);
}

inline Spt4Tensor load_spt4(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_spt4(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace sparsepool
