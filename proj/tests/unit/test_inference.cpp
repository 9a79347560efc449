#include <algorithm>

#include "nlohmann/json.hpp"
#include "prag/error.hpp"
#include "prag/inference.hpp"
#include "prag/lora.hpp"
#include "unit/support.hpp"

using namespace prag;
using inference::Mode;

namespace {

const std::vector<std::string> kPassages{"vaso drimek plays the cello .", "pelmora is a city in the north .",
                                         "trelok motors is headquartered in sandrel ."};
const std::string kQuestion = "what instrument does vaso drimek play ?";

const lm::Tokenizer& tokenizer() {
  static const lm::Tokenizer tok = [] {
    std::vector<std::string> texts = kPassages;
    texts.push_back(kQuestion);
    texts.push_back(inference::render_prompt({}, kPassages, kQuestion));
    return lm::Tokenizer::build(texts);
  }();
  return tok;
}

lm::TransformerLM model(std::int32_t ctx = 96) {
  lm::ModelConfig c;
  c.vocab_size = static_cast<std::int32_t>(tokenizer().size());
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = ctx;
  return lm::TransformerLM::init(c, 21);
}

lora::LoraAdapter random_adapter(const lm::ModelConfig& c, const std::string& id, std::uint64_t seed) {
  auto a = lora::init_adapter(c, id, 2, 32.0f, seed);
  for (std::size_t t = 0; t < a.targets.size(); ++t)
    a.targets[t].b = testing::random_tensor(a.targets[t].b.shape(), seed * 13 + t, 0.5f);
  return a;
}

std::size_t count(const std::string& text) { return tokenizer().encode(text).size(); }

}  // namespace

TEST_CASE("mode names and prerequisites") {
  for (auto m : inference::all_modes()) CHECK(inference::parse_mode(inference::mode_name(m)) == m);
  CHECK_THROWS_AS(inference::parse_mode("dyprag"), ConfigError);
  CHECK_FALSE(inference::uses_passages(Mode::Vanilla));
  CHECK(inference::uses_passages(Mode::PragCombine));
  CHECK(inference::uses_adapters(Mode::Prag));
  CHECK_FALSE(inference::uses_adapters(Mode::Rag));
}

TEST_CASE("build_prompt layout") {
  const auto& tok = tokenizer();
  const inference::PromptTemplate t;
  const auto zero = inference::build_prompt(tok, t, kQuestion, {}, 256);
  CHECK(zero.tokens.front() == lm::Tokenizer::kEos);
  CHECK(tok.decode(zero.tokens) == "answer the question briefly . question : " + kQuestion + " answer :");
  CHECK(zero.passages_used == 0);

  const auto full = inference::build_prompt(tok, t, kQuestion, kPassages, 256);
  const std::string text = tok.decode(full.tokens);
  std::size_t last = 0;
  for (const auto& p : kPassages) {
    const auto at = text.find("passage : " + p);
    REQUIRE(at != std::string::npos);
    CHECK(at >= last);
    last = at;
  }
  CHECK(text.find("question : " + kQuestion) > last);

  // Count: BOS + instruction + (marker + passage) per passage + question marker + question + answer marker.
  std::size_t expected = 1 + count(t.instruction) + count(t.question_marker) + count(kQuestion) + count(t.answer_marker);
  for (const auto& p : kPassages) expected += count(t.passage_marker) + count(p);
  CHECK(full.tokens.size() == expected);
  CHECK_FALSE(full.truncated);

  const std::size_t without_last = expected - count(t.passage_marker) - count(kPassages[2]);
  const auto cut = inference::build_prompt(tok, t, kQuestion, kPassages, without_last);
  CHECK(cut.truncated);
  CHECK(cut.passages_used == 2);
  CHECK(cut.tokens.size() == without_last);
  CHECK(tok.decode(cut.tokens).find(kPassages[2]) == std::string::npos);

  CHECK_THROWS_AS(inference::build_prompt(tok, t, kQuestion, kPassages, 5), ConfigError);
}

TEST_CASE("zero adapters collapse Prag to Vanilla and PragCombine to Rag") {
  const auto m = model();
  const auto& tok = tokenizer();
  const auto z1 = lora::init_adapter(m.config(), "p0", 2, 32.0f, 1), z2 = lora::init_adapter(m.config(), "p1", 2, 32.0f, 2);
  const lora::LoraAdapter* zs[] = {&z1, &z2};
  const inference::AnswerOptions opts{.max_new = 12};
  const auto van = inference::answer(m, tok, Mode::Vanilla, "q", kQuestion, {}, nullptr, 0, opts);
  const auto prag = inference::answer(m, tok, Mode::Prag, "q", kQuestion, {}, zs, opts);
  CHECK(prag.ids == van.ids);
  CHECK(prag.text == van.text);
  CHECK(prag.prompt_tokens == van.prompt_tokens);
  CHECK(prag.adapters_merged == 2);

  const auto rag = inference::answer(m, tok, Mode::Rag, "q", kQuestion, kPassages, nullptr, 0, opts);
  const auto comb = inference::answer(m, tok, Mode::PragCombine, "q", kQuestion, kPassages, zs, opts);
  CHECK(comb.ids == rag.ids);
  CHECK(comb.prompt_tokens == rag.prompt_tokens);
  CHECK(rag.passages_used == 3);
  CHECK(rag.prompt_tokens > van.prompt_tokens);
}

TEST_CASE("answer contracts") {
  const auto m = model();
  const auto& tok = tokenizer();
  const auto a = random_adapter(m.config(), "p0", 5), b = random_adapter(m.config(), "p1", 6);
  const lora::LoraAdapter* ab[] = {&a, &b};
  const inference::AnswerOptions opts{.max_new = 10, .want_taps = true};

  const auto van = inference::answer(m, tok, Mode::Vanilla, "q", kQuestion, kPassages, nullptr, 0, opts);
  const auto prag = inference::answer(m, tok, Mode::Prag, "q", kQuestion, kPassages, ab, opts);
  CHECK(prag.prompt_tokens == van.prompt_tokens);
  CHECK(van.passages_used == 0);
  CHECK(prag.text == tok.decode(prag.ids));
  REQUIRE(prag.taps);
  CHECK(prag.taps->positions.size() == prag.ids.size() + (prag.hit_eos ? 1 : 0));
  CHECK(prag.ids.size() <= 10);

  const auto again = inference::answer(m, tok, Mode::Prag, "q", kQuestion, kPassages, ab, opts);
  CHECK(again.ids == prag.ids);

  // Merged form and pre-merged delta agree.
  const auto merged = lora::merge(std::vector<lora::LoraAdapter>{a, b});
  const auto pre = inference::answer(m, tok, Mode::Prag, "q", kQuestion, {}, &merged, 2, opts);
  CHECK(pre.ids == prag.ids);

  // A task delta passed as `extra` is applied in Vanilla mode too.
  inference::AnswerOptions with_extra{.max_new = 10, .extra = &merged};
  const auto van_extra = inference::answer(m, tok, Mode::Vanilla, "q", kQuestion, {}, nullptr, 0, with_extra);
  CHECK(van_extra.ids == pre.ids);
  CHECK(van_extra.adapters_merged == 0);

  const auto no_taps = inference::answer(m, tok, Mode::Vanilla, "q", kQuestion, {}, nullptr, 0, {.max_new = 4});
  CHECK_FALSE(no_taps.taps);

  CHECK_THROWS_AS(inference::answer(m, tok, Mode::Rag, "q", kQuestion, {}, nullptr, 0, opts), ConfigError);
  CHECK_THROWS_AS(inference::answer(m, tok, Mode::Prag, "q", kQuestion, {}, nullptr, 0, opts), ConfigError);
  CHECK_THROWS_AS(inference::answer(m, tok, Mode::PragCombine, "q", kQuestion, kPassages, nullptr, 0, opts),
                  ConfigError);
  CHECK_THROWS_AS(
      inference::answer(m, tok, Mode::Prag, "q", kQuestion, {}, std::span<const lora::LoraAdapter* const>{}, opts),
      ConfigError);

  const auto j = nlohmann::json::parse(inference::to_json(prag));
  CHECK(j.at("question_id") == "q");
  CHECK(j.at("mode") == "prag");
  CHECK(j.at("text") == prag.text);
  CHECK_FALSE(j.contains("taps"));
}

TEST_CASE("long contexts drop trailing passages") {
  const auto m = model(40);
  const auto& tok = tokenizer();
  const auto r = inference::answer(m, tok, Mode::Rag, "q", kQuestion, kPassages, nullptr, 0, {.max_new = 8});
  CHECK(r.truncated);
  CHECK(r.passages_used < 3);
  CHECK(r.prompt_tokens <= 32);
}
