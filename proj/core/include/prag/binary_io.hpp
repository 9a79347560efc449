#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "prag/tensor.hpp"

namespace prag::io {

std::array<std::uint8_t, 32> sha256(std::string_view bytes);
std::string sha256_hex(std::string_view bytes);
std::string file_sha256_hex(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Little-endian record builder shared by checkpoint and adapter files.
/// Layout of a named matrix: u32 name length, name bytes, u32 rank, rank x u32
/// dims, then the f32 payload.
class BinaryWriter {
 public:
  void raw(std::string_view bytes) { buf_.append(bytes); }
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v);
  void str(std::string_view s);
  void tensor(std::string_view name, const num::Tensor& t);

  /// Appends the SHA-256 of everything written so far.
  void seal();
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

/// Bounds-checked reader; every failure is a CorruptFileError.
class BinaryReader {
 public:
  /// Verifies and strips a trailing SHA-256 written by BinaryWriter::seal().
  static BinaryReader sealed(std::string bytes, std::string_view what);

  explicit BinaryReader(std::string bytes, std::string what) : buf_(std::move(bytes)), what_(std::move(what)) {}

  std::string raw(std::size_t n);
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32();
  std::string str();
  /// Reads a named matrix, returning its name.
  std::pair<std::string, num::Tensor> tensor();

  bool at_end() const { return pos_ == buf_.size(); }
  [[noreturn]] void fail(const std::string& why) const;

 private:
  void need(std::size_t n) const;
  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace prag::io
