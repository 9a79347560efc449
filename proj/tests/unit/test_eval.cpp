#include <algorithm>
#include <set>

#include "prag/error.hpp"
#include "prag/eval.hpp"
#include "prag/rng.hpp"
#include "unit/support.hpp"

using namespace prag;
using eval::ScoredItem;

namespace {

std::vector<std::string> one(std::string s) { return {std::move(s)}; }

std::string random_string(Rng& rng) {
  static const std::string alphabet = "aAbBtThHeEnN .,!?'-  \t0123";
  std::string s;
  const auto len = rng.below(25);
  for (std::uint64_t i = 0; i < len; ++i)
    s.push_back(alphabet[rng.below(alphabet.size())]);
  return s;
}

}  // namespace

TEST_CASE("normalize_answer") {
  CHECK(eval::normalize_answer("The Eiffel Tower.") == "eiffel tower");
  CHECK(eval::normalize_answer("  A  cat ") == "cat");
  CHECK(eval::normalize_answer("An apple, the pie") == "apple the pie");
  CHECK(eval::normalize_answer("") == "");
  CHECK(eval::normalize_answer("the") == "");
  CHECK(eval::answer_tokens("New-York  City!") == std::vector<std::string>{"new", "york", "city"});

  Rng rng(99);
  for (int i = 0; i < 2000; ++i) {
    const auto s = random_string(rng);
    const auto n = eval::normalize_answer(s);
    INFO(s);
    CHECK(eval::normalize_answer(n) == n);
  }
}

TEST_CASE("alias_match") {
  CHECK(eval::alias_match("paris", one("paris")));
  CHECK(eval::alias_match("the answer is paris", one("Paris")));
  CHECK_FALSE(eval::alias_match("comparison", one("paris")));
  CHECK(eval::alias_match("he works for trelok", std::vector<std::string>{"trelok motors", "trelok"}));
  CHECK_FALSE(eval::alias_match("motors trelok", one("trelok motors")));
  CHECK_THROWS_AS(eval::alias_match("x", std::vector<std::string>{}), ConfigError);

  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    auto s = random_string(rng);
    if (eval::normalize_answer(s).empty()) continue;
    CHECK(eval::alias_match(s, one(s)));
  }
}

TEST_CASE("token_f1") {
  const std::string wash = "University of Washington", chic = "University of Chicago";
  CHECK(eval::token_f1(wash, chic) == doctest::Approx(2.0 / 3.0).epsilon(1e-4));
  CHECK_FALSE(eval::alias_match(wash, one(chic)));
  CHECK(eval::token_f1("the red car", "red car") == 1.0);
  CHECK(eval::token_f1("alpha beta", "gamma") == 0.0);
  CHECK(eval::token_f1("", "") == 1.0);
  CHECK(eval::token_f1("", "x") == 0.0);
  CHECK(eval::token_f1("x", "") == 0.0);
  // Duplicates are matched one-for-one.
  CHECK(eval::token_f1("x b b", "b") == doctest::Approx(0.5));
  CHECK(eval::token_f1("b b c", "b b d") == doctest::Approx(2.0 / 3.0));

  Rng rng(17);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_string(rng), b = random_string(rng);
    const double f = eval::token_f1(a, b);
    CHECK(f == eval::token_f1(b, a));
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
    auto ta = eval::answer_tokens(a), tb = eval::answer_tokens(b);
    std::sort(ta.begin(), ta.end());
    std::sort(tb.begin(), tb.end());
    CHECK((f == 1.0) == (ta == tb));
  }
}

TEST_CASE("alias oracle judge") {
  eval::AliasOracle judge;
  const std::vector<std::string> truth{"trelok motors", "trelok"};
  const auto yes = judge.judge("q1", "who?", truth, "Trelok.");
  CHECK(yes.correct);
  CHECK(yes.question_id == "q1");
  CHECK(yes.scorer == eval::Scorer::AliasOracle);
  REQUIRE(yes.f1);
  CHECK(*yes.f1 == 1.0);
  const auto no = judge.judge("q2", "who?", truth, "pelmora motors");
  CHECK_FALSE(no.correct);
  CHECK(*no.f1 == doctest::Approx(0.5));
  CHECK(eval::parse_scorer(eval::scorer_name(eval::Scorer::RemoteJudge)) == eval::Scorer::RemoteJudge);
  CHECK_THROWS_AS(eval::parse_scorer("llm"), ConfigError);
}

TEST_CASE("aggregate") {
  std::vector<ScoredItem> all_right(3, ScoredItem{{"prag"}, true, 1.0});
  const auto r = eval::aggregate(all_right);
  REQUIRE(r.size() == 1);
  CHECK(r[0].accuracy == 100.0);
  CHECK(r[0].n == 3);

  std::vector<ScoredItem> quarter{{{"rag"}, true, {}}, {{"rag"}, false, {}}, {{"rag"}, false, {}}, {{"rag"}, false, {}}};
  const auto q = eval::aggregate(quarter);
  CHECK(q[0].accuracy == 25.0);
  CHECK_FALSE(q[0].mean_f1);

  std::vector<ScoredItem> mixed;
  Rng rng(3);
  std::set<std::vector<std::string>> tuples;
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> k{"t" + std::to_string(rng.below(2)), "m" + std::to_string(rng.below(4)),
                               "n" + std::to_string(rng.below(4))};
    tuples.insert(k);
    mixed.push_back({k, rng.below(2) == 1, 0.5});
  }
  const auto rows = eval::aggregate(mixed);
  CHECK(rows.size() == tuples.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    total += rows[i].n;
    if (i) CHECK(rows[i - 1].keys < rows[i].keys);
    CHECK(rows[i].mean_f1 == doctest::Approx(0.5));
  }
  CHECK(total == mixed.size());

  CHECK_THROWS_AS(eval::aggregate(std::vector<ScoredItem>{}), ConfigError);
  CHECK_THROWS_AS(eval::aggregate(std::vector<ScoredItem>{{{"a"}, true, {}}, {{"a", "b"}, true, {}}}), ConfigError);
}

TEST_CASE("bundled divergence example") {
  const auto& ex = eval::divergence_example();
  CHECK(eval::token_f1(ex.prediction, ex.truth.front()) == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
  eval::AliasOracle oracle;
  const auto j = oracle.judge("x", ex.question, ex.truth, ex.prediction);
  CHECK_FALSE(j.correct);
  REQUIRE(j.f1);
  CHECK(*j.f1 > 0.6);
}
