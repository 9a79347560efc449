#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prag/eval.hpp"
#include "prag/inference.hpp"
#include "prag/lora.hpp"
#include "prag/model.hpp"
#include "prag/parameterize.hpp"
#include "prag/retrieval.hpp"
#include "prag/tokenizer.hpp"
#include "prag/world.hpp"

namespace prag::harness {

namespace fs = std::filesystem;

/// Vocabulary over everything a world can show the model: pretraining text,
/// corpus, questions, answers and counterfactual passages.
lm::Tokenizer world_tokenizer(const world::World& world);

/// Default desk-scale base model for a world's vocabulary.
lm::ModelConfig default_model_config(std::int32_t vocab_size);

enum class PassageSource : std::uint8_t { Retrieved, Gold };
std::string source_name(PassageSource s);
PassageSource parse_source(std::string_view s);

enum class Probe : std::uint8_t { Off, On, Both };
std::string probe_name(Probe p);
Probe parse_probe(std::string_view s);

/// INI-style experiment description. Relative paths resolve against the
/// directory of the file they were read from.
struct ExperimentConfig {
  // [paths]
  fs::path world;      // directory with corpus.jsonl and dataset.jsonl
  fs::path model;      // checkpoint
  fs::path tokenizer;  // vocabulary; defaults to vocab.txt next to the checkpoint
  fs::path adapters;   // adapter store directory
  fs::path output;     // run directory

  // [run]
  std::vector<inference::Mode> modes = inference::all_modes();
  std::vector<retrieval::NoiseCondition> noise = {retrieval::NoiseCondition::Top3};
  std::vector<world::QuestionType> types = {world::QuestionType::Factual, world::QuestionType::Multihop};
  std::size_t k = 3;
  PassageSource source = PassageSource::Retrieved;
  Probe probe = Probe::Off;
  std::size_t max_questions = 0;  // per question type, 0 = all
  bool pks = false;
  bool faithfulness = false;
  std::size_t faithfulness_questions = 0;  // 0 = all
  bool similarity = false;
  eval::Scorer scorer = eval::Scorer::AliasOracle;
  std::size_t threads = 1;
  std::uint64_t seed = 7;
  double max_failure_fraction = 0.05;
  std::size_t max_new = 32;

  // [lora]
  std::string preset = "desk";
  param::LoraHyper hyper = param::lora_preset("desk");
  std::string augmentor = "synthetic";  // or "remote"

  // [task_lora]
  std::size_t task_questions = 200;

  static ExperimentConfig parse(const std::string& text, const fs::path& base_dir);
  static ExperimentConfig load(const fs::path& path);
  /// Throws ConfigError on invalid values or missing input paths.
  void validate() const;
  /// Canonical key=value rendering of every field; the basis of hash().
  std::string canonical() const;
  std::string hash() const;
};

/// Augmentor named by the configuration.
std::unique_ptr<param::Augmentor> make_augmentor(const std::string& name, std::uint64_t seed);

/// One adapter over the union of the augmented gold passages of `records`.
/// Throws ConfigError when a record id or article is in `eval_records`.
lora::LoraAdapter train_task_lora(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                                  std::span<const world::DatasetRecord> records,
                                  std::span<const world::Document> corpus, param::Augmentor& augmentor,
                                  const param::LoraHyper& hyper, std::span<const world::DatasetRecord> eval_records,
                                  param::LoraTrainReport* report = nullptr);

struct RunResult {
  fs::path dir;
  std::size_t items = 0;
  std::size_t failures = 0;
  bool failure_threshold_exceeded = false;
};

using Progress = std::function<void(const std::string& stage, std::size_t done, std::size_t total)>;

/// Runs every (question, mode, noise, probe) item and writes answers.jsonl,
/// judgments.jsonl, failures.jsonl, optional pks_profiles.jsonl and
/// similarity_pairs.csv, and manifest.json into the output directory.
RunResult run_experiment(const ExperimentConfig& config, const Progress& progress = {});

/// Derives accuracy.csv, pks.csv, similarity_hist.csv, faithfulness.csv and
/// summary.txt under `<run>/report`. Returns the written paths.
std::vector<fs::path> report(const fs::path& run_dir);

}  // namespace prag::harness
