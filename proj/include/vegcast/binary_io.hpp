#pragma once

// Little-endian record writer/reader with a trailing FNV-1a checksum, shared
// by the minicube and checkpoint formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "vegcast/error.hpp"

namespace vegcast::io {

inline constexpr std::uint64_t fnv1a_offset = 14695981039346656037ULL;
inline constexpr std::uint64_t fnv1a_prime = 1099511628211ULL;

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t hash = fnv1a_offset) {
  for (std::uint8_t b : bytes) {
    hash ^= b;
    hash *= fnv1a_prime;
  }
  return hash;
}

class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

  template <class U>
  void scalar(U v) {
    static_assert(std::is_arithmetic_v<U>);
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    const auto bits = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }

  template <class U>
  void array(std::span<const U> values) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
      bytes_.insert(bytes_.end(), p, p + values.size_bytes());
    } else {
      for (U v : values) scalar(v);
    }
  }

  /// Appends the FNV-1a checksum of everything written so far.
  void seal() { scalar(fnv1a(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(std::string_view tag) {
    need(tag.size());
    if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) {
      throw Error(ErrorCode::bad_magic, "expected \"" + std::string(tag) + "\"");
    }
    pos_ += tag.size();
  }

  template <class U>
  U scalar() {
    static_assert(std::is_arithmetic_v<U>);
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(U));
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(Bits{bytes_[pos_ + i]} << (8 * i));
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }

  template <class U>
  std::vector<U> array(std::size_t count) {
    need(count * sizeof(U));
    std::vector<U> out(count);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(U));
      pos_ += count * sizeof(U);
    } else {
      for (U& v : out) v = scalar<U>();
    }
    return out;
  }

  /// Reads the trailing checksum and compares it with the hash of all bytes
  /// before it. The checksum must be the last 8 bytes.
  void verify_seal() {
    const std::size_t payload_end = pos_;
    const auto stored = scalar<std::uint64_t>();
    if (pos_ != bytes_.size()) {
      throw Error(ErrorCode::checksum, std::to_string(bytes_.size() - pos_) + " unexpected bytes after checksum");
    }
    if (fnv1a(bytes_.first(payload_end)) != stored) throw Error(ErrorCode::checksum, "FNV-1a mismatch");
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCode::truncated, "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                                            ", have " + std::to_string(bytes_.size() - pos_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace vegcast::io
