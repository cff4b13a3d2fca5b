#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mris/errors.hpp"

namespace mris::io {

/// 64-bit FNV-1a over a byte range. Used as the trailing payload checksum of
/// every binary file the engine writes.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (std::uint8_t b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

/// Appends little-endian encoded values to a byte buffer.
class ByteWriter {
public:
  void bytes(std::string_view s) {
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  /// Appends the checksum of everything written so far.
  void seal() { u64(fnv1a64(buf_)); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader. Any read past the end throws
/// DataError("truncated ...").
class ByteReader {
public:
  ByteReader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    std::string_view out(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string string() {
    auto n = u32();
    return std::string(bytes(n));
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void expect_magic(std::string_view magic) {
    if (data_.size() < magic.size() ||
        std::memcmp(data_.data(), magic.data(), magic.size()) != 0)
      throw DataError(what_ + ": bad magic (expected \"" + std::string(magic) +
                      "\")");
    pos_ = magic.size();
  }

  /// Validates the trailing checksum and that nothing follows it.
  void verify_seal() {
    auto payload = data_.first(pos_);
    std::uint64_t stored = u64();
    if (remaining() != 0)
      throw DataError(what_ + ": trailing bytes after checksum");
    if (fnv1a64(payload) != stored)
      throw DataError(what_ + ": checksum mismatch");
  }

  /// Checks the trailing checksum up front so that no partially decoded
  /// object is ever built from a corrupted file.
  void verify_checksum_first() {
    if (data_.size() < 8)
      throw DataError(what_ + ": truncated (no checksum)");
    auto payload = data_.first(data_.size() - 8);
    ByteReader tail(data_.subspan(data_.size() - 8), what_);
    if (fnv1a64(payload) != tail.u64())
      throw DataError(what_ + ": checksum mismatch");
  }

private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n)
      throw DataError(what_ + ": truncated at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::filesystem::path& path,
                       std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out)
    throw DataError("write failed for " + path.string());
}

} // namespace mris::io
