#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prag/world.hpp"

namespace prag::retrieval {

/// Tokenizer segmentation without punctuation tokens.
std::vector<std::string> analyze(std::string_view text);

struct Posting {
  std::uint32_t doc;
  std::uint32_t tf;
};

struct CorpusIndex {
  std::vector<std::string> doc_ids;
  std::vector<std::string> article_ids;
  std::vector<std::uint32_t> doc_len;
  std::map<std::string, std::vector<Posting>> postings;  // term -> docs in id order
  double avgdl = 0.0;
  double k1 = 1.2;
  double b = 0.75;

  std::size_t size() const noexcept { return doc_ids.size(); }
  std::uint32_t df(const std::string& term) const;
  std::uint32_t tf(const std::string& term, std::size_t doc) const;
  /// ln(1 + (N - df + 0.5) / (df + 0.5)).
  double idf(const std::string& term) const;
  std::size_t find(const std::string& doc_id) const;  // throws ConfigError if absent
};

CorpusIndex build_index(std::span<const world::Document> corpus);

struct Hit {
  std::size_t doc;
  std::string doc_id;
  double score;
};

struct RetrievalResult {
  std::vector<Hit> hits;
  bool truncated = false;  // k exceeded the corpus size
};

/// BM25 over the distinct query terms; score descending, ties by doc_id.
RetrievalResult retrieve(const CorpusIndex& index, std::string_view query, std::size_t k = 3);

enum class NoiseCondition : std::uint8_t { Top3, ReplaceLast, ReplaceFirst, ReplaceAll };
std::string noise_name(NoiseCondition c);
NoiseCondition parse_noise(std::string_view s);
const std::vector<NoiseCondition>& all_noise_conditions();

/// Replaces positions selected by `condition` with passages drawn uniformly
/// (seeded) from documents outside `gold_article` and outside the list.
std::vector<std::string> inject_noise(std::span<const std::string> passage_ids, NoiseCondition condition,
                                      const CorpusIndex& index, const std::string& gold_article, std::uint64_t seed);

/// "PRAGBM25", u32 version, f64 k1, f64 b, documents, postings, SHA-256 trailer.
void save_index(const CorpusIndex& index, const std::filesystem::path& path);
CorpusIndex load_index(const std::filesystem::path& path);

}  // namespace prag::retrieval
