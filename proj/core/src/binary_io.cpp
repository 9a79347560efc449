#include "prag/binary_io.hpp"

#include <openssl/evp.h>

#include <unistd.h>

#include <atomic>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "prag/error.hpp"

namespace prag::io {

std::array<std::uint8_t, 32> sha256(std::string_view bytes) {
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
    throw Error("sha256: digest failed");
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  const auto d = sha256(bytes);
  std::string s;
  s.reserve(64);
  for (auto b : d) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 15]);
  }
  return s;
}

std::string file_sha256_hex(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Unique per writer so concurrent writers of the same target never share a temp file.
  static std::atomic<std::uint64_t> counter{0};
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void BinaryWriter::u32(std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  buf_.append(b, 4);
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.append(s);
}

void BinaryWriter::tensor(std::string_view name, const num::Tensor& t) {
  str(name);
  u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) u32(static_cast<std::uint32_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    buf_.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  } else {
    for (float v : t.values()) f32(v);
  }
}

void BinaryWriter::seal() {
  const auto digest = sha256(buf_);
  buf_.append(reinterpret_cast<const char*>(digest.data()), digest.size());
}

BinaryReader BinaryReader::sealed(std::string bytes, std::string_view what) {
  if (bytes.size() < 32) throw CorruptFileError(std::string(what) + ": file too short");
  const std::string_view body(bytes.data(), bytes.size() - 32);
  const auto digest = sha256(body);
  if (std::memcmp(digest.data(), bytes.data() + body.size(), 32) != 0)
    throw CorruptFileError(std::string(what) + ": checksum mismatch (truncated or modified)");
  bytes.resize(body.size());
  return BinaryReader(std::move(bytes), std::string(what));
}

void BinaryReader::fail(const std::string& why) const { throw CorruptFileError(what_ + ": " + why); }

void BinaryReader::need(std::size_t n) const {
  if (buf_.size() - pos_ < n) fail("unexpected end of data");
}

std::string BinaryReader::raw(std::size_t n) {
  need(n);
  std::string s = buf_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
  pos_ += 4;
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }

std::string BinaryReader::str() {
  const auto n = u32();
  return raw(n);
}

std::pair<std::string, num::Tensor> BinaryReader::tensor() {
  std::string name = str();
  const auto rank = u32();
  if (rank == 0 || rank > 4) fail("bad tensor rank for " + name);
  num::Shape shape;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = u32();
    if (d == 0) fail("zero dimension in " + name);
    shape.push_back(d);
    count *= d;
  }
  need(count * sizeof(float));
  std::vector<float> values(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), buf_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
  } else {
    for (auto& v : values) v = f32();
  }
  return {std::move(name), num::Tensor(std::move(shape), std::move(values))};
}

}  // namespace prag::io
