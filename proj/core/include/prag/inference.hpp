#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prag/lora.hpp"
#include "prag/model.hpp"
#include "prag/prompt.hpp"
#include "prag/tokenizer.hpp"

namespace prag::inference {

enum class Mode : std::uint8_t { Vanilla, Rag, Prag, PragCombine };

std::string mode_name(Mode m);
Mode parse_mode(std::string_view s);
const std::vector<Mode>& all_modes();
bool uses_passages(Mode m);
bool uses_adapters(Mode m);

struct Prompt {
  std::vector<std::int32_t> tokens;  // begins with EOS, which doubles as BOS
  std::size_t passages_used = 0;
  bool truncated = false;  // lowest-ranked passages were dropped to fit
};

/// Passages in the given order, then the question. Passages are dropped from
/// the end of the list until the prompt fits `max_tokens`.
Prompt build_prompt(const lm::Tokenizer& tok, const PromptTemplate& tmpl, const std::string& question,
                    std::span<const std::string> passages, std::size_t max_tokens);

struct AnswerOptions {
  std::size_t max_new = 32;
  bool want_taps = false;
  PromptTemplate tmpl;
  /// Added to the weights in every mode, on top of any merged document
  /// adapters (task-adapter probe). Not counted in adapters_merged.
  const lora::DeltaSet* extra = nullptr;
};

struct AnswerRecord {
  std::string question_id;
  Mode mode = Mode::Vanilla;
  std::string text;
  std::vector<std::int32_t> ids;
  std::optional<lm::ResidualTaps> taps;
  std::size_t prompt_tokens = 0;
  std::size_t passages_used = 0;
  std::size_t adapters_merged = 0;
  bool truncated = false;
  bool hit_eos = false;
  double seconds = 0.0;
};

/// Vanilla: question only. Rag: passages + question. Prag: question with the
/// merged delta. PragCombine: passages + question with the merged delta.
/// `delta` is the already merged update and `adapters_merged` its size.
AnswerRecord answer(const lm::TransformerLM& model, const lm::Tokenizer& tok, Mode mode,
                    const std::string& question_id, const std::string& question,
                    std::span<const std::string> passages, const lora::DeltaSet* delta, std::size_t adapters_merged,
                    const AnswerOptions& options = {});

/// Convenience form merging `adapters` first.
AnswerRecord answer(const lm::TransformerLM& model, const lm::Tokenizer& tok, Mode mode,
                    const std::string& question_id, const std::string& question,
                    std::span<const std::string> passages, std::span<const lora::LoraAdapter* const> adapters,
                    const AnswerOptions& options = {});

/// One JSON object (no taps, no trailing newline).
std::string to_json(const AnswerRecord& r);

}  // namespace prag::inference
