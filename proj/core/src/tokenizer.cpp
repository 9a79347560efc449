#include "prag/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "prag/binary_io.hpp"
#include "prag/error.hpp"

namespace prag::lm {

namespace {

const char* const kSpecial[] = {"<pad>", "<eos>", "<unk>"};

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

}  // namespace

std::vector<std::string> Tokenizer::segment(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (is_word_char(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
      continue;
    }
    if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    if (!std::isspace(c)) out.emplace_back(1, static_cast<char>(c));
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool Tokenizer::is_punctuation(std::string_view token) {
  return token.size() == 1 && !is_word_char(static_cast<unsigned char>(token[0]));
}

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second)
      throw ConfigError("tokenizer: duplicate token '" + tokens_[i] + "'");
  }
}

Tokenizer Tokenizer::build(std::span<const std::string> texts) {
  std::set<std::string> seen;
  for (const auto& t : texts)
    for (auto& tok : segment(t)) seen.insert(std::move(tok));
  std::vector<std::string> tokens(std::begin(kSpecial), std::end(kSpecial));
  tokens.insert(tokens.end(), seen.begin(), seen.end());
  return Tokenizer(std::move(tokens));
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  if (tokens.size() < static_cast<std::size_t>(kReserved)) throw CorruptFileError("vocabulary too small: " + path.string());
  for (int i = 0; i < kReserved; ++i)
    if (tokens[static_cast<std::size_t>(i)] != kSpecial[i])
      throw CorruptFileError("vocabulary reserved ids are not <pad>,<eos>,<unk>: " + path.string());
  return Tokenizer(std::move(tokens));
}

std::string Tokenizer::serialize() const {
  std::string out;
  for (const auto& t : tokens_) out += t + "\n";
  return out;
}

void Tokenizer::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  for (const auto& tok : segment(text)) ids.push_back(id(tok));
  return ids;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (auto i : ids) {
    if (i < kReserved) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(i);
  }
  return out;
}

std::int32_t Tokenizer::id(std::string_view tok) const {
  auto it = index_.find(std::string(tok));
  return it == index_.end() ? kUnk : it->second;
}

bool Tokenizer::contains(std::string_view tok) const { return index_.contains(std::string(tok)); }

const std::string& Tokenizer::token(std::int32_t i) const {
  if (i < 0 || static_cast<std::size_t>(i) >= tokens_.size()) throw ConfigError("tokenizer: id out of range");
  return tokens_[static_cast<std::size_t>(i)];
}

}  // namespace prag::lm
