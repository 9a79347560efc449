#include "prag/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "prag/error.hpp"
#include "prag/eval.hpp"
#include "prag/rng.hpp"

namespace prag::analysis {

namespace {

constexpr double kFloor = 1e-12;

template <typename T>
double jsd_impl(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size()) throw ConfigError("jsd: lengths differ");
  if (p.empty()) throw ConfigError("jsd: empty distributions");
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw ConfigError("jsd: negative probability");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-5 || std::abs(sq - 1.0) > 1e-5) throw ConfigError("jsd: input is not normalized");
  double kp = 0.0, kq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i], b = q[i];
    const double lm = std::log2(std::max(0.5 * (a + b), kFloor));
    if (a > 0) kp += a * (std::log2(std::max(a, kFloor)) - lm);
    if (b > 0) kq += b * (std::log2(std::max(b, kFloor)) - lm);
  }
  // Summation order is symmetric in (p, q) so jsd(p,q) == jsd(q,p) exactly.
  return std::clamp(0.5 * kp + 0.5 * kq, 0.0, 1.0);
}

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Summary summarize(const std::vector<double>& xs, std::size_t bins) {
  Summary s;
  s.n = xs.size();
  s.histogram.assign(bins, 0);
  if (xs.empty()) return s;
  s.min = *std::min_element(xs.begin(), xs.end());
  s.max = *std::max_element(xs.begin(), xs.end());
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  for (double x : xs) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(xs.size()));
  for (double x : xs) {
    auto b = static_cast<std::size_t>((x + 1.0) / 2.0 * static_cast<double>(bins));
    ++s.histogram[std::min(b, bins - 1)];
  }
  return s;
}

}  // namespace

double jsd(std::span<const float> p, std::span<const float> q) { return jsd_impl(p, q); }
double jsd(std::span<const double> p, std::span<const double> q) { return jsd_impl(p, q); }

PksProfile pks_profile(const lm::TransformerLM& model, const lm::ResidualTaps& taps, std::string question_id,
                       std::string mode) {
  const std::size_t L = taps.n_layers();
  if (L == 0 || taps.positions.empty()) throw ConfigError("pks_profile: no generated tokens to score");
  if (taps.after.size() != L) throw ShapeError("pks_profile: before/after layer counts differ");
  PksProfile prof{std::move(question_id), std::move(mode), std::vector<double>(L, 0.0), taps.positions.size()};
  const std::size_t d = static_cast<std::size_t>(model.config().d_model);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& before = taps.before[l];
    const auto& after = taps.after[l];
    if (before.rows() != taps.positions.size() || after.rows() != before.rows() || before.cols() != d ||
        after.cols() != d)
      throw ShapeError("pks_profile: tap shape mismatch at layer " + std::to_string(l));
    double sum = 0.0;
    for (std::size_t n = 0; n < before.rows(); ++n) {
      const auto pb = lm::logit_lens(model, {before.data() + n * d, d});
      const auto pa = lm::logit_lens(model, {after.data() + n * d, d});
      sum += jsd(std::span<const float>(pb), std::span<const float>(pa));
    }
    prof.scores[l] = sum / static_cast<double>(before.rows());
  }
  return prof;
}

PksDifference pks_difference(std::span<const PksProfile> injected, std::span<const PksProfile> baseline) {
  auto by_question = [](std::span<const PksProfile> set) {
    std::map<std::string, const PksProfile*> m;
    for (const auto& p : set)
      if (!m.emplace(p.question_id, &p).second)
        throw ConfigError("pks_difference: duplicate question '" + p.question_id + "'");
    return m;
  };
  const auto a = by_question(injected), b = by_question(baseline);
  if (a.empty()) throw ConfigError("pks_difference: empty profile sets");
  if (a.size() != b.size() || !std::equal(a.begin(), a.end(), b.begin(),
                                          [](const auto& x, const auto& y) { return x.first == y.first; }))
    throw ConfigError("pks_difference: question sets differ");
  const std::size_t L = a.begin()->second->scores.size();
  PksDifference d{std::vector<double>(L, 0.0), std::vector<double>(L, 0.0), std::vector<double>(L, 0.0),
                  std::vector<std::size_t>(L, 0)};
  for (const auto& [q, p] : a) {
    const PksProfile* base = b.at(q);
    if (p->scores.size() != L || base->scores.size() != L)
      throw ConfigError("pks_difference: layer counts differ for '" + q + "'");
    for (std::size_t l = 0; l < L; ++l) {
      d.mean_injected[l] += p->scores[l];
      d.mean_baseline[l] += base->scores[l];
      ++d.counts[l];
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    d.mean_injected[l] /= static_cast<double>(d.counts[l]);
    d.mean_baseline[l] /= static_cast<double>(d.counts[l]);
    d.difference[l] = d.mean_injected[l] - d.mean_baseline[l];
  }
  return d;
}

SimilarityStudy similarity_study(std::vector<SimilarityItem> items, std::uint64_t seed, std::size_t bins) {
  if (bins == 0) throw ConfigError("similarity_study: bins must be >= 1");
  std::sort(items.begin(), items.end(), [](const auto& x, const auto& y) { return x.doc_id < y.doc_id; });
  std::map<std::string, std::size_t> per_article;
  for (const auto& it : items) ++per_article[it.article_id];
  const auto multi = std::count_if(per_article.begin(), per_article.end(), [](const auto& kv) { return kv.second >= 2; });
  if (multi < 2) throw ConfigError("similarity_study: need two articles with at least two adapters each");

  SimilarityStudy s;
  const std::size_t n = items.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (items[i].article_id == items[j].article_id)
        s.pairs.push_back({items[i].doc_id, items[j].doc_id, true,
                           lora::cosine_similarity(items[i].flat, items[j].flat)});
  const std::size_t n_rel = s.pairs.size();

  std::size_t n_cross = 0;
  for (const auto& [art, c] : per_article) n_cross += c * (n - c);
  n_cross /= 2;
  const std::size_t want = std::min(n_rel, n_cross);
  std::set<std::pair<std::size_t, std::size_t>> chosen;
  Rng rng(seed);
  while (chosen.size() < want) {
    std::size_t i = rng.below(n), j = rng.below(n);
    if (items[i].article_id == items[j].article_id) continue;
    if (i > j) std::swap(i, j);
    chosen.insert({i, j});
  }
  for (const auto& [i, j] : chosen)
    s.pairs.push_back({items[i].doc_id, items[j].doc_id, false, lora::cosine_similarity(items[i].flat, items[j].flat)});

  std::vector<double> rel, irr;
  for (const auto& p : s.pairs) (p.relevant ? rel : irr).push_back(p.similarity);
  s.relevant = summarize(rel, bins);
  s.irrelevant = summarize(irr, bins);
  return s;
}

SimilarityStudy similarity_study(const lora::AdapterStore& store, std::span<const world::Document> corpus,
                                 const lm::ModelConfig& config, std::uint64_t seed, std::size_t bins) {
  const auto manifest = store.read_manifest();
  std::vector<SimilarityItem> items;
  for (const auto& d : corpus) {
    auto it = manifest.find(d.id);
    if (it == manifest.end()) continue;
    items.push_back({d.id, d.article_id, lora::flatten(store.get(it->second, config))});
  }
  return similarity_study(std::move(items), seed, bins);
}

std::string answer_class_name(AnswerClass c) {
  switch (c) {
    case AnswerClass::Counterfactual: return "counterfactual";
    case AnswerClass::Original: return "original";
    case AnswerClass::Both: return "both";
    case AnswerClass::Other: return "other";
  }
  return "?";
}

AnswerClass classify_answer(const std::string& text, std::span<const std::string> counterfactual,
                            std::span<const std::string> original) {
  if (counterfactual.empty() || original.empty()) throw ConfigError("classify_answer: empty alias set");
  std::set<std::string> cf;
  for (const auto& a : counterfactual) cf.insert(eval::normalize_answer(a));
  for (const auto& a : original)
    if (cf.contains(eval::normalize_answer(a)))
      throw ConfigError("classify_answer: alias '" + a + "' is in both sets");
  const bool c = eval::alias_match(text, counterfactual);
  const bool o = eval::alias_match(text, original);
  if (c && o) return AnswerClass::Both;
  if (c) return AnswerClass::Counterfactual;
  if (o) return AnswerClass::Original;
  return AnswerClass::Other;
}

std::string pks_csv(const PksDifference& d) {
  std::string out = "layer,n,injected,baseline,difference\n";
  for (std::size_t l = 0; l < d.difference.size(); ++l)
    out += std::to_string(l + 1) + "," + std::to_string(d.counts[l]) + "," + fmt(d.mean_injected[l]) + "," +
           fmt(d.mean_baseline[l]) + "," + fmt(d.difference[l]) + "\n";
  return out;
}

std::string similarity_pairs_csv(const SimilarityStudy& s) {
  std::string out = "doc_a,doc_b,relation,similarity\n";
  for (const auto& p : s.pairs)
    out += p.a + "," + p.b + "," + (p.relevant ? "relevant" : "irrelevant") + "," + fmt(p.similarity) + "\n";
  return out;
}

std::string similarity_histogram_csv(const SimilarityStudy& s) {
  const std::size_t bins = s.relevant.histogram.size();
  std::string out = "bin_low,bin_high,relevant,irrelevant\n";
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins);
    const double hi = -1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(bins);
    out += fmt(lo, 3) + "," + fmt(hi, 3) + "," + std::to_string(s.relevant.histogram[b]) + "," +
           std::to_string(s.irrelevant.histogram[b]) + "\n";
  }
  return out;
}

}  // namespace prag::analysis
