#pragma once

// Little-endian primitives for the versioned binary containers (dataset
// cache, model checkpoint).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "mtabl/error.hpp"
#include "mtabl/matrix.hpp"

namespace mtabl::binary {

template <typename T>
inline void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
inline T read_le(std::istream& is, const char* what) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
inline std::uint64_t read_u64(std::istream& is, const char* what) {
  return read_le<std::uint64_t>(is, what);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what,
                               std::uint64_t max_len = 1ull << 30) {
  const auto n = read_u64(is, what);
  if (n > max_len) throw FormatError(std::string("implausible string length for ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  return s;
}

/// Shape header (rows, cols) followed by rows*cols little-endian doubles.
inline void write_matrix(std::ostream& os, const Matrix& m) {
  write_u64(os, m.rows());
  write_u64(os, m.cols());
  for (double v : m.data()) write_le(os, v);
}

inline Matrix read_matrix(std::istream& is, const char* what) {
  const auto rows = read_u64(is, what);
  const auto cols = read_u64(is, what);
  if (rows == 0 || cols == 0 || rows > (1ull << 32) || cols > (1ull << 32) ||
      rows * cols > (1ull << 34)) {
    throw FormatError(std::string("invalid matrix shape header for ") + what);
  }
  std::vector<double> data(rows * cols);
  for (double& v : data) v = read_le<double>(is, what);
  return Matrix(rows, cols, std::move(data));
}

inline void write_magic(std::ostream& os, const std::array<char, 8>& magic, std::uint32_t version) {
  os.write(magic.data(), magic.size());
  write_le(os, version);
}

/// Checks the magic and returns the stored version.
inline std::uint32_t read_magic(std::istream& is, const std::array<char, 8>& magic,
                                const char* what) {
  std::array<char, 8> got{};
  if (!is.read(got.data(), got.size()) || got != magic) {
    throw FormatError(std::string("not a ") + what + " file (bad magic)");
  }
  return read_le<std::uint32_t>(is, what);
}

}  // namespace mtabl::binary
