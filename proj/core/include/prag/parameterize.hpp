#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "prag/lora.hpp"
#include "prag/model.hpp"
#include "prag/prompt.hpp"
#include "prag/remote.hpp"
#include "prag/tokenizer.hpp"
#include "prag/world.hpp"

namespace prag::param {

using world::Document;

struct QaPair {
  std::string question;
  std::string answer;
};

struct Augmentation {
  std::vector<std::string> rewrites;
  std::vector<QaPair> qa_pairs;
};

/// Produces document rewrites and QA pairs. Implementations return exactly
/// n rewrites and m pairs or throw.
class Augmentor {
 public:
  virtual ~Augmentor() = default;
  virtual Augmentation generate(const Document& doc, std::size_t n, std::size_t m) = 0;
  /// Identifies the augmentation source; part of every adapter's content key.
  virtual std::string provenance() const = 0;
};

/// Template paraphrases of the facts found in the document and one question
/// per fact (cycling when m exceeds the fact count). Deterministic.
class SyntheticAugmentor final : public Augmentor {
 public:
  explicit SyntheticAugmentor(std::uint64_t seed = 0) : seed_(seed) {}
  Augmentation generate(const Document& doc, std::size_t n, std::size_t m) override;
  std::string provenance() const override { return "synthetic:" + std::to_string(seed_); }

 private:
  std::uint64_t seed_;
};

/// Client for an external generator. Request line {"text","n","m"}, response
/// line {"rewrites":[...],"qa":[{"q","a"}]}.
class RemoteAugmentor final : public Augmentor {
 public:
  explicit RemoteAugmentor(remote::Endpoint endpoint);
  /// Endpoint from PRAG_AUGMENTOR_URL; throws ConfigError if unset.
  static std::unique_ptr<RemoteAugmentor> from_env();
  Augmentation generate(const Document& doc, std::size_t n, std::size_t m) override;
  std::string provenance() const override { return "remote:" + endpoint_.url; }

 private:
  remote::Endpoint endpoint_;
  remote::Limiter limiter_;
};

struct AugmentedDataset {
  std::string doc_id;
  std::vector<std::string> rewrites;
  std::vector<QaPair> qa_pairs;
  struct Sample {
    std::size_t rewrite;
    std::size_t qa;
  };
  std::vector<Sample> samples;  // rewrite-major cartesian product
};

AugmentedDataset build_dataset(const Document& doc, Augmentor& augmentor, std::size_t n = 1, std::size_t m = 3);

struct TrainingSequence {
  std::vector<std::int32_t> tokens;  // prompt + answer + EOS
  std::size_t answer_begin = 0;      // index of the first answer token
  bool truncated = false;            // document head was dropped to fit
};

/// concat(document, question, answer) in the shared prompt template,
/// EOS-terminated; `max_tokens` bounds the result.
TrainingSequence make_training_sequence(const lm::Tokenizer& tok, const inference::PromptTemplate& tmpl,
                                        const std::string& document, const QaPair& qa, std::size_t max_tokens);

struct LoraHyper {
  std::int32_t rank = 2;
  float alpha = 32.0f;
  float lr = 3e-4f;
  std::int32_t epochs = 1;
  std::size_t n_rewrites = 1;
  std::size_t n_qa = 3;
  bool answer_only = false;  // ablation: loss on answer tokens only
  float clip_norm = 0.0f;    // 0 disables clipping
  std::uint64_t seed = 0;

  /// Canonical text of every field, used in content keys.
  std::string describe() const;
};

/// Learning-rate / epoch presets. "paper" is lr 3e-4 for one epoch.
LoraHyper lora_preset(const std::string& name);

struct LoraTrainReport {
  std::vector<float> epoch_nll;       // mean loss per epoch (before each step's update)
  std::size_t contributing_tokens = 0;  // per epoch
  std::size_t steps = 0;
};

/// Trains one adapter on every sample of `datasets` (batch of one sequence,
/// seeded shuffle per epoch). The base model is read-only.
lora::LoraAdapter train_lora(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                             std::span<const AugmentedDataset* const> datasets, const LoraHyper& hyper,
                             const std::string& adapter_id, LoraTrainReport* report = nullptr,
                             const inference::PromptTemplate& tmpl = {});

lora::LoraAdapter train_document_lora(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                                      const AugmentedDataset& dataset, const LoraHyper& hyper,
                                      LoraTrainReport* report = nullptr, const inference::PromptTemplate& tmpl = {});

/// Content key of a document's adapter: SHA-256 over the document id and
/// text, the hyperparameters, the augmentor and the base weights.
std::string adapter_key(const Document& doc, const LoraHyper& hyper, const std::string& augmentor,
                        const std::string& model_digest);

struct ParameterizeReport {
  std::size_t trained = 0;
  std::size_t reused = 0;
  std::map<std::string, std::string> failures;  // doc_id -> message
  std::map<std::string, std::string> manifest;  // doc_id -> key
};

/// One adapter per document, skipping documents whose keyed file is already
/// present and intact. Failures are collected per document. The manifest
/// is merged into the store's existing manifest.
ParameterizeReport parameterize_corpus(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                                       std::span<const Document> corpus, Augmentor& augmentor,
                                       const LoraHyper& hyper, const lora::AdapterStore& store,
                                       std::size_t threads = 1,
                                       const std::function<void(std::size_t done, std::size_t total)>& progress = {});

}  // namespace prag::param
