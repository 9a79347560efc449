#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prag/remote.hpp"

namespace prag::eval {

/// Lowercase, punctuation to spaces, leading articles dropped, whitespace collapsed.
std::string normalize_answer(std::string_view text);
std::vector<std::string> answer_tokens(std::string_view text);

/// True iff some normalized alias occurs as a contiguous token run of the
/// normalized prediction. Throws ConfigError on an empty alias set.
bool alias_match(std::string_view prediction, std::span<const std::string> aliases);

/// Bag-of-tokens F1 over normalized tokens; both empty -> 1, one empty -> 0.
double token_f1(std::string_view prediction, std::string_view truth);

enum class Scorer : std::uint8_t { AliasOracle, RemoteJudge };
std::string scorer_name(Scorer s);
Scorer parse_scorer(std::string_view s);

struct Judgment {
  std::string question_id;
  bool correct = false;
  Scorer scorer = Scorer::AliasOracle;
  std::string payload;  // raw verdict (remote response line, or the matched alias)
  std::optional<double> f1;
};

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual Judgment judge(const std::string& question_id, const std::string& question,
                         std::span<const std::string> truth, const std::string& prediction) = 0;
  virtual Scorer scorer() const = 0;
};

class AliasOracle final : public JudgeClient {
 public:
  Judgment judge(const std::string& question_id, const std::string& question, std::span<const std::string> truth,
                 const std::string& prediction) override;
  Scorer scorer() const override { return Scorer::AliasOracle; }
};

/// Sends {"question","truth","prediction"} and expects {"correct": bool}.
/// The first alias is sent as the ground truth.
class RemoteJudge final : public JudgeClient {
 public:
  explicit RemoteJudge(remote::Endpoint endpoint);
  /// Endpoint from PRAG_JUDGE_URL; throws ConfigError if unset.
  static std::unique_ptr<RemoteJudge> from_env();
  Judgment judge(const std::string& question_id, const std::string& question, std::span<const std::string> truth,
                 const std::string& prediction) override;
  Scorer scorer() const override { return Scorer::RemoteJudge; }

 private:
  remote::Endpoint endpoint_;
  remote::Limiter limiter_;
};

std::unique_ptr<JudgeClient> make_judge(Scorer s);

/// A near-miss answer that token F1 rewards and the alias oracle rejects.
struct DivergenceExample {
  std::string question;
  std::string prediction;
  std::vector<std::string> truth;
};
const DivergenceExample& divergence_example();

struct ScoredItem {
  std::vector<std::string> keys;  // grouping key tuple
  bool correct = false;
  std::optional<double> f1;
};

struct AccuracyRow {
  std::vector<std::string> keys;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;  // percent
  std::optional<double> mean_f1;
};

/// One row per distinct key tuple, ordered by key tuple. Throws ConfigError
/// when `items` is empty or key tuples differ in length.
std::vector<AccuracyRow> aggregate(std::span<const ScoredItem> items);

}  // namespace prag::eval
