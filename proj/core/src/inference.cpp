#include "prag/inference.hpp"

#include <chrono>

#include <nlohmann/json.hpp>

#include "prag/error.hpp"

namespace prag::inference {

std::string render_prompt(const PromptTemplate& tmpl, std::span<const std::string> passages,
                          const std::string& question) {
  std::string out = tmpl.instruction;
  for (const auto& p : passages) out += " " + tmpl.passage_marker + " " + p;
  out += " " + tmpl.question_marker + " " + question + " " + tmpl.answer_marker;
  return out;
}

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Vanilla: return "vanilla";
    case Mode::Rag: return "rag";
    case Mode::Prag: return "prag";
    case Mode::PragCombine: return "prag_combine";
  }
  return "?";
}

Mode parse_mode(std::string_view s) {
  for (auto m : all_modes())
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> all = {Mode::Vanilla, Mode::Rag, Mode::Prag, Mode::PragCombine};
  return all;
}

bool uses_passages(Mode m) { return m == Mode::Rag || m == Mode::PragCombine; }
bool uses_adapters(Mode m) { return m == Mode::Prag || m == Mode::PragCombine; }

Prompt build_prompt(const lm::Tokenizer& tok, const PromptTemplate& tmpl, const std::string& question,
                    std::span<const std::string> passages, std::size_t max_tokens) {
  Prompt p;
  for (std::size_t used = passages.size() + 1; used-- > 0;) {
    p.tokens = {lm::Tokenizer::kEos};
    const auto body = tok.encode(render_prompt(tmpl, passages.first(used), question));
    p.tokens.insert(p.tokens.end(), body.begin(), body.end());
    if (p.tokens.size() <= max_tokens) {
      p.passages_used = used;
      p.truncated = used < passages.size();
      return p;
    }
  }
  throw ConfigError("build_prompt: question alone exceeds " + std::to_string(max_tokens) + " tokens");
}

AnswerRecord answer(const lm::TransformerLM& model, const lm::Tokenizer& tok, Mode mode,
                    const std::string& question_id, const std::string& question,
                    std::span<const std::string> passages, const lora::DeltaSet* delta, std::size_t adapters_merged,
                    const AnswerOptions& options) {
  if (uses_passages(mode) && passages.empty())
    throw ConfigError(mode_name(mode) + " requires passages (question " + question_id + ")");
  if (uses_adapters(mode) && (delta == nullptr || adapters_merged == 0))
    throw ConfigError(mode_name(mode) + " requires adapters (question " + question_id + ")");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t ctx = static_cast<std::size_t>(model.config().max_seq_len);
  const std::size_t budget = ctx > options.max_new ? ctx - options.max_new : 1;
  const Prompt prompt = build_prompt(tok, options.tmpl, question,
                                     uses_passages(mode) ? passages : std::span<const std::string>{}, budget);
  const lora::DeltaSet* applied = uses_adapters(mode) ? delta : nullptr;
  std::optional<lora::DeltaSet> combined;
  if (options.extra) {
    if (applied) {
      combined = *applied;
      lora::accumulate(*combined, *options.extra);
      applied = &*combined;
    } else {
      applied = options.extra;
    }
  }
  auto dec = lm::greedy_decode(model, prompt.tokens, applied, options.max_new, lm::Tokenizer::kEos, options.want_taps);
  AnswerRecord r;
  r.question_id = question_id;
  r.mode = mode;
  r.ids = std::move(dec.tokens);
  r.text = tok.decode(r.ids);
  r.taps = std::move(dec.taps);
  r.prompt_tokens = prompt.tokens.size();
  r.passages_used = prompt.passages_used;
  r.adapters_merged = uses_adapters(mode) ? adapters_merged : 0;
  r.truncated = prompt.truncated;
  r.hit_eos = dec.hit_eos;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

AnswerRecord answer(const lm::TransformerLM& model, const lm::Tokenizer& tok, Mode mode,
                    const std::string& question_id, const std::string& question,
                    std::span<const std::string> passages, std::span<const lora::LoraAdapter* const> adapters,
                    const AnswerOptions& options) {
  if (uses_adapters(mode) && adapters.empty())
    throw ConfigError(mode_name(mode) + " requires adapters (question " + question_id + ")");
  std::optional<lora::DeltaSet> merged;
  if (uses_adapters(mode)) merged = lora::merge(adapters);
  return answer(model, tok, mode, question_id, question, passages, merged ? &*merged : nullptr, adapters.size(),
                options);
}

std::string to_json(const AnswerRecord& r) {
  return nlohmann::json{{"question_id", r.question_id},
                        {"mode", mode_name(r.mode)},
                        {"text", r.text},
                        {"ids", r.ids},
                        {"prompt_tokens", r.prompt_tokens},
                        {"passages_used", r.passages_used},
                        {"adapters_merged", r.adapters_merged},
                        {"truncated", r.truncated},
                        {"hit_eos", r.hit_eos},
                        {"seconds", r.seconds}}
      .dump();
}

}  // namespace prag::inference
