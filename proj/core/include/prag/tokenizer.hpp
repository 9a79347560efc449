#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace prag::lm {

/// Word-level tokenizer. Text is lowercased (ASCII) and split into maximal
/// runs of word characters; every other non-space character is a token of its
/// own. Ids 0..2 are reserved for <pad>, <eos> and <unk>; corpus tokens can
/// never spell those because '<' always splits.
class Tokenizer {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kEos = 1;
  static constexpr std::int32_t kUnk = 2;
  static constexpr std::int32_t kReserved = 3;

  /// The normalization rule shared by the model and the retriever.
  static std::vector<std::string> segment(std::string_view text);
  static bool is_punctuation(std::string_view token);

  /// Vocabulary over every token seen in `texts`, in lexicographic order after
  /// the reserved ids, so the result does not depend on text order.
  static Tokenizer build(std::span<const std::string> texts);

  /// Newline-delimited UTF-8, id = zero-based line number.
  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string serialize() const;

  std::vector<std::int32_t> encode(std::string_view text) const;
  /// Tokens joined by single spaces; reserved ids are skipped.
  std::string decode(std::span<const std::int32_t> ids) const;

  std::int32_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  std::size_t size() const noexcept { return tokens_.size(); }

 private:
  explicit Tokenizer(std::vector<std::string> tokens);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

}  // namespace prag::lm
