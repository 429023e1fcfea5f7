#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "physiosync/errors.hpp"

namespace physiosync::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {
template <class U>
U byteswap(U v) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(bytes[i], bytes[sizeof(U) - 1 - i]);
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}
template <class U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  else return byteswap(v);
}
}  // namespace detail

template <class U>
void write_le(std::ostream& os, U v) {
  v = detail::to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw IoError("unexpected end of stream");
  return detail::to_le(v);
}

/// Raw little-endian float32 file, no header.
inline void write_f32_file(const std::filesystem::path& path, std::span<const float> values) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) write_le(os, v);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<float> read_f32_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFileError(path.string());
  const auto bytes = std::filesystem::file_size(path);
  if (bytes % 4 != 0) throw IoError("float32 file size not a multiple of 4: " + path.string());
  std::vector<float> values(bytes / 4);
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw IoError("short read: " + path.string());
  if constexpr (std::endian::native != std::endian::little)
    for (auto& v : values) v = detail::byteswap(v);
  return values;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << text;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFileError(path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace physiosync::io
