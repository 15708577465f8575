#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "lafa/common.hpp"

// Little-endian primitives shared by the bundle, index and model formats.
namespace lafa::detail {

template <typename UInt>
inline void put_le(std::ostream& out, UInt value) {
  std::array<char, sizeof(UInt)> bytes{};
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFU);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename UInt>
inline UInt get_le(std::istream& in, std::string_view what) {
  std::array<unsigned char, sizeof(UInt)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw CorruptBundleError("unexpected end of file while reading " + std::string(what));
  }
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    value |= static_cast<UInt>(bytes[i]) << (8 * i);
  }
  return value;
}

inline void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
inline void put_f32(std::ostream& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t get_u32(std::istream& in, std::string_view what) {
  return get_le<std::uint32_t>(in, what);
}
inline float get_f32(std::istream& in, std::string_view what) {
  return std::bit_cast<float>(get_le<std::uint32_t>(in, what));
}
inline double get_f64(std::istream& in, std::string_view what) {
  return std::bit_cast<double>(get_le<std::uint64_t>(in, what));
}

inline void put_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic, const std::string& file) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (in.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic) {
    throw FormatError(file + ": bad magic, expected " + std::string(magic));
  }
}

}  // namespace lafa::detail
