#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prag/lora.hpp"
#include "prag/model.hpp"
#include "prag/world.hpp"

namespace prag::analysis {

/// Base-2 Jensen-Shannon divergence in [0, 1]. Inputs must have equal length
/// and each sum to 1 within 1e-5; logarithms use max(m, 1e-12).
double jsd(std::span<const float> p, std::span<const float> q);
double jsd(std::span<const double> p, std::span<const double> q);

struct PksProfile {
  std::string question_id;
  std::string mode;
  std::vector<double> scores;  // one per layer
  std::size_t tokens = 0;
};

/// Per layer, the mean over generated tokens of
/// jsd(lens(before), lens(after)). Throws ConfigError without taps rows.
PksProfile pks_profile(const lm::TransformerLM& model, const lm::ResidualTaps& taps, std::string question_id = {},
                       std::string mode = {});

struct PksDifference {
  std::vector<double> mean_injected;
  std::vector<double> mean_baseline;
  std::vector<double> difference;  // injected - baseline
  std::vector<std::size_t> counts;
};

/// Profiles are averaged per question first, then across questions. The two
/// sets must cover the same question ids with the same layer count.
PksDifference pks_difference(std::span<const PksProfile> injected, std::span<const PksProfile> baseline);

struct SimilarityItem {
  std::string doc_id;
  std::string article_id;
  std::vector<float> flat;
};

struct SimilarityPair {
  std::string a, b;
  bool relevant = false;
  double similarity = 0.0;
};

struct Summary {
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> histogram;  // equal bins over [-1, 1]
};

struct SimilarityStudy {
  std::vector<SimilarityPair> pairs;  // relevant first, each group sorted by (a, b)
  Summary relevant, irrelevant;
  double gap() const noexcept { return relevant.mean - irrelevant.mean; }
};

/// Every same-article pair against an equally sized seeded sample of
/// cross-article pairs. Needs at least two articles with two or more items.
SimilarityStudy similarity_study(std::vector<SimilarityItem> items, std::uint64_t seed, std::size_t bins = 20);

/// Loads the manifest adapters for `corpus` from `store`.
SimilarityStudy similarity_study(const lora::AdapterStore& store, std::span<const world::Document> corpus,
                                 const lm::ModelConfig& config, std::uint64_t seed, std::size_t bins = 20);

enum class AnswerClass : std::uint8_t { Counterfactual, Original, Both, Other };
std::string answer_class_name(AnswerClass c);

/// Token-run containment of normalized aliases. Throws ConfigError on empty
/// sets or when an alias normalizes identically in both sets.
AnswerClass classify_answer(const std::string& text, std::span<const std::string> counterfactual,
                            std::span<const std::string> original);

std::string pks_csv(const PksDifference& d);
std::string similarity_pairs_csv(const SimilarityStudy& s);
std::string similarity_histogram_csv(const SimilarityStudy& s);

}  // namespace prag::analysis
