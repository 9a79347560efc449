#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace prag::world {

enum class EntityType : std::uint8_t { Person, City, Company, University, Instrument };

std::string type_name(EntityType t);

/// A relation with its surface forms. Templates are token strings where
/// "{s}" and "{o}" mark the subject and object slots.
struct Relation {
  std::string name;
  EntityType subject;
  EntityType object;
  std::vector<std::string> sentences;
  std::vector<std::string> questions;
};

const std::vector<Relation>& relations();
const Relation& relation(std::string_view name);

/// Two-hop question forms: employer of {s}, then that company's headquarters.
const std::vector<std::string>& multihop_questions();

struct Fact {
  std::string subject;
  std::string relation;
  std::string object;
  friend bool operator==(const Fact&, const Fact&) = default;
};

std::string render_sentence(const Fact& fact, std::size_t variant);
std::string render_question(const Fact& fact, std::size_t variant);
std::string render_multihop_question(const std::string& person, std::size_t variant);

/// Facts stated in `text`, one per sentence that matches a relation template,
/// in order of appearance.
std::vector<Fact> parse_facts(std::string_view text);

/// Normalized answer strings accepted for an entity.
std::vector<std::string> aliases(const std::string& entity, EntityType type);

struct SyntheticWorldSpec {
  std::uint64_t seed = 7;
  std::size_t n_articles = 300;       // held-out news articles used for evaluation
  std::size_t n_pool_articles = 100;  // held-out articles feeding the task-adapter pool
  std::size_t n_known_persons = 200;  // persons whose facts are in pretraining
  std::size_t n_known_companies = 40;
  std::size_t n_cities = 60;
  std::size_t n_universities = 30;
  std::size_t n_instruments = 20;
  std::size_t facts_per_article = 6;  // person facts plus the employer's headquarters
  std::size_t max_passages = 3;
  std::size_t multihop_depth = 2;
  std::size_t n_factual = 300;
  std::size_t n_multihop = 150;
  std::size_t task_pool = 200;
  std::size_t n_faithfulness = 100;
  // Pretraining mix.
  std::size_t bio_variants = 6;
  std::size_t n_openbook = 16000;
  std::size_t roster_passes = 3;

  /// Throws ConfigError when the spec cannot be satisfied.
  void validate() const;
};

struct Document {
  std::string id;
  std::string article_id;
  std::string title;
  std::string text;
};

struct CounterfactualBundle {
  std::vector<Document> passages;  // edited copies of the gold passages
  std::vector<std::string> counterfactual_answers;
  std::vector<std::string> original_answers;
};

enum class QuestionType : std::uint8_t { Factual, Multihop };
std::string question_type_name(QuestionType t);
QuestionType parse_question_type(std::string_view s);

struct DatasetRecord {
  std::string id;
  std::string question;
  std::vector<std::string> answers;
  std::vector<std::string> gold;  // document ids
  QuestionType type = QuestionType::Factual;
  std::string article_id;
  std::string split;  // "eval", "task_pool" or "faithfulness"
  std::optional<CounterfactualBundle> counterfactual;
};

struct Entity {
  std::string name;
  EntityType type;
};

struct World {
  SyntheticWorldSpec spec;
  std::vector<Entity> entities;
  std::vector<Fact> known_facts;     // appear in pretraining
  std::vector<Fact> heldout_facts;   // appear only in the document corpus
  std::vector<std::string> pretraining;  // one training sequence per entry
  std::vector<Document> corpus;
  std::vector<DatasetRecord> records;

  std::optional<EntityType> type_of(const std::string& entity) const;
  std::vector<std::string> names_of(EntityType type) const;
};

World gen_synthetic_world(const SyntheticWorldSpec& spec);

/// Replaces the record's answer entity with a same-type substitute in every
/// gold passage. Throws ConfigError if no substitute exists or the answer
/// does not occur in the gold passages.
CounterfactualBundle gen_counterfactual(const DatasetRecord& record, const World& world,
                                        const std::vector<Document>& gold_passages, std::uint64_t seed);

/// Newline-delimited JSON records.
std::string corpus_to_ndjson(const std::vector<Document>& docs);
std::vector<Document> corpus_from_ndjson(std::string_view text);
std::string records_to_ndjson(const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> records_from_ndjson(std::string_view text);

/// Writes pretrain.txt, corpus.jsonl, dataset.jsonl, entities.tsv and
/// heldout_facts.tsv into `dir`.
void save_world(const World& world, const std::filesystem::path& dir);
/// Loads the files written by save_world (facts, corpus, dataset, entities).
World load_world(const std::filesystem::path& dir);

}  // namespace prag::world
