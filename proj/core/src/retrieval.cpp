#include "prag/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <unordered_map>

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/rng.hpp"
#include "prag/tokenizer.hpp"

namespace prag::retrieval {

std::vector<std::string> analyze(std::string_view text) {
  auto toks = lm::Tokenizer::segment(text);
  std::erase_if(toks, [](const std::string& t) { return lm::Tokenizer::is_punctuation(t); });
  return toks;
}

std::uint32_t CorpusIndex::df(const std::string& term) const {
  auto it = postings.find(term);
  return it == postings.end() ? 0 : static_cast<std::uint32_t>(it->second.size());
}

std::uint32_t CorpusIndex::tf(const std::string& term, std::size_t doc) const {
  auto it = postings.find(term);
  if (it == postings.end()) return 0;
  auto p = std::lower_bound(it->second.begin(), it->second.end(), doc,
                            [](const Posting& x, std::size_t d) { return x.doc < d; });
  return p != it->second.end() && p->doc == doc ? p->tf : 0;
}

double CorpusIndex::idf(const std::string& term) const {
  const double n = static_cast<double>(df(term));
  return std::log(1.0 + (static_cast<double>(size()) - n + 0.5) / (n + 0.5));
}

std::size_t CorpusIndex::find(const std::string& doc_id) const {
  for (std::size_t i = 0; i < doc_ids.size(); ++i)
    if (doc_ids[i] == doc_id) return i;
  throw ConfigError("document '" + doc_id + "' is not in the index");
}

CorpusIndex build_index(std::span<const world::Document> corpus) {
  if (corpus.empty()) throw ConfigError("build_index: empty corpus");
  CorpusIndex idx;
  double total = 0;
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    const auto terms = analyze(corpus[d].title + " " + corpus[d].text);
    std::map<std::string, std::uint32_t> counts;
    for (const auto& t : terms) ++counts[t];
    for (const auto& [t, c] : counts) idx.postings[t].push_back({static_cast<std::uint32_t>(d), c});
    idx.doc_ids.push_back(corpus[d].id);
    idx.article_ids.push_back(corpus[d].article_id);
    idx.doc_len.push_back(static_cast<std::uint32_t>(terms.size()));
    total += static_cast<double>(terms.size());
  }
  idx.avgdl = total / static_cast<double>(corpus.size());
  if (idx.avgdl <= 0.0) throw ConfigError("build_index: corpus has no indexable terms");
  return idx;
}

RetrievalResult retrieve(const CorpusIndex& index, std::string_view query, std::size_t k) {
  if (k < 1) throw ConfigError("retrieve: k must be >= 1");
  auto terms = analyze(query);
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

  std::vector<double> score(index.size(), 0.0);
  for (const auto& t : terms) {
    auto it = index.postings.find(t);
    if (it == index.postings.end()) continue;
    const double idf = index.idf(t);
    for (const auto& p : it->second) {
      const double tf = p.tf;
      const double norm = index.k1 * (1.0 - index.b + index.b * index.doc_len[p.doc] / index.avgdl);
      score[p.doc] += idf * tf * (index.k1 + 1.0) / (tf + norm);
    }
  }
  std::vector<std::size_t> order(index.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t take = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (score[a] != score[b]) return score[a] > score[b];
                      return index.doc_ids[a] < index.doc_ids[b];
                    });
  RetrievalResult r;
  r.truncated = k > index.size();
  for (std::size_t i = 0; i < take; ++i) r.hits.push_back({order[i], index.doc_ids[order[i]], score[order[i]]});
  return r;
}

std::string noise_name(NoiseCondition c) {
  switch (c) {
    case NoiseCondition::Top3: return "top3";
    case NoiseCondition::ReplaceLast: return "replace_last";
    case NoiseCondition::ReplaceFirst: return "replace_first";
    case NoiseCondition::ReplaceAll: return "replace_all";
  }
  return "?";
}

NoiseCondition parse_noise(std::string_view s) {
  for (auto c : all_noise_conditions())
    if (noise_name(c) == s) return c;
  throw ConfigError("unknown noise condition '" + std::string(s) + "'");
}

const std::vector<NoiseCondition>& all_noise_conditions() {
  static const std::vector<NoiseCondition> all = {NoiseCondition::Top3, NoiseCondition::ReplaceLast,
                                                  NoiseCondition::ReplaceFirst, NoiseCondition::ReplaceAll};
  return all;
}

std::vector<std::string> inject_noise(std::span<const std::string> passage_ids, NoiseCondition condition,
                                      const CorpusIndex& index, const std::string& gold_article, std::uint64_t seed) {
  std::vector<std::string> out(passage_ids.begin(), passage_ids.end());
  if (condition == NoiseCondition::Top3 || out.empty()) return out;
  std::vector<std::size_t> positions;
  if (condition == NoiseCondition::ReplaceFirst) positions = {0};
  if (condition == NoiseCondition::ReplaceLast) positions = {out.size() - 1};
  if (condition == NoiseCondition::ReplaceAll)
    for (std::size_t i = 0; i < out.size(); ++i) positions.push_back(i);

  const std::set<std::string> original(out.begin(), out.end());
  std::vector<std::size_t> pool;
  for (std::size_t d = 0; d < index.size(); ++d)
    if (index.article_ids[d] != gold_article && !original.contains(index.doc_ids[d])) pool.push_back(d);
  if (pool.size() < positions.size())
    throw ConfigError("inject_noise: corpus too small to supply " + std::to_string(positions.size()) +
                      " distinct noise passages");
  Rng rng(seed);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    // Partial Fisher-Yates: distinct uniform draws without replacement.
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
    out[positions[i]] = index.doc_ids[pool[i]];
  }
  return out;
}

void save_index(const CorpusIndex& index, const std::filesystem::path& path) {
  io::BinaryWriter w;
  w.raw("PRAGBM25");
  w.u32(1);
  auto f64 = [&](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    w.u32(static_cast<std::uint32_t>(bits));
    w.u32(static_cast<std::uint32_t>(bits >> 32));
  };
  f64(index.k1);
  f64(index.b);
  f64(index.avgdl);
  w.u32(static_cast<std::uint32_t>(index.size()));
  for (std::size_t d = 0; d < index.size(); ++d) {
    w.str(index.doc_ids[d]);
    w.str(index.article_ids[d]);
    w.u32(index.doc_len[d]);
  }
  w.u32(static_cast<std::uint32_t>(index.postings.size()));
  for (const auto& [term, list] : index.postings) {
    w.str(term);
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& p : list) {
      w.u32(p.doc);
      w.u32(p.tf);
    }
  }
  w.seal();
  io::write_file_atomic(path, w.bytes());
}

CorpusIndex load_index(const std::filesystem::path& path) {
  auto r = io::BinaryReader::sealed(io::read_file(path), "index " + path.string());
  if (r.raw(8) != "PRAGBM25") r.fail("bad magic");
  if (r.u32() != 1) r.fail("unsupported version");
  auto f64 = [&] {
    std::uint64_t lo = r.u32(), hi = r.u32();
    const std::uint64_t bits = lo | (hi << 32);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  };
  CorpusIndex idx;
  idx.k1 = f64();
  idx.b = f64();
  idx.avgdl = f64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t d = 0; d < n; ++d) {
    idx.doc_ids.push_back(r.str());
    idx.article_ids.push_back(r.str());
    idx.doc_len.push_back(r.u32());
  }
  const std::uint32_t terms = r.u32();
  for (std::uint32_t t = 0; t < terms; ++t) {
    std::string term = r.str();
    const std::uint32_t len = r.u32();
    auto& list = idx.postings[term];
    for (std::uint32_t i = 0; i < len; ++i) {
      const std::uint32_t doc = r.u32(), tf = r.u32();
      if (doc >= n) r.fail("posting refers to a missing document");
      list.push_back({doc, tf});
    }
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return idx;
}

}  // namespace prag::retrieval
