#include "prag/eval.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "prag/error.hpp"

namespace prag::eval {

std::vector<std::string> answer_tokens(std::string_view text) {
  std::string s;
  s.reserve(text.size());
  for (unsigned char c : text) s.push_back(std::isalnum(c) ? static_cast<char>(std::tolower(c)) : ' ');
  std::vector<std::string> toks;
  std::istringstream in(s);
  for (std::string t; in >> t;) toks.push_back(t);
  std::size_t lead = 0;
  while (lead < toks.size() && (toks[lead] == "a" || toks[lead] == "an" || toks[lead] == "the")) ++lead;
  toks.erase(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(lead));
  return toks;
}

std::string normalize_answer(std::string_view text) {
  std::string out;
  for (const auto& t : answer_tokens(text)) out += (out.empty() ? "" : " ") + t;
  return out;
}

bool alias_match(std::string_view prediction, std::span<const std::string> aliases) {
  if (aliases.empty()) throw ConfigError("alias_match: empty alias set");
  const auto pred = answer_tokens(prediction);
  for (const auto& alias : aliases) {
    const auto a = answer_tokens(alias);
    if (a.empty()) continue;
    if (std::search(pred.begin(), pred.end(), a.begin(), a.end()) != pred.end()) return true;
  }
  return false;
}

double token_f1(std::string_view prediction, std::string_view truth) {
  const auto p = answer_tokens(prediction), t = answer_tokens(truth);
  if (p.empty() && t.empty()) return 1.0;
  if (p.empty() || t.empty()) return 0.0;
  std::map<std::string, int> bag;
  for (const auto& x : t) ++bag[x];
  std::size_t common = 0;
  for (const auto& x : p)
    if (auto it = bag.find(x); it != bag.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(t.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::string scorer_name(Scorer s) { return s == Scorer::AliasOracle ? "alias_oracle" : "remote_judge"; }

Scorer parse_scorer(std::string_view s) {
  if (s == "alias_oracle") return Scorer::AliasOracle;
  if (s == "remote_judge") return Scorer::RemoteJudge;
  throw ConfigError("unknown scorer '" + std::string(s) + "'");
}

Judgment AliasOracle::judge(const std::string& question_id, const std::string&, std::span<const std::string> truth,
                            const std::string& prediction) {
  Judgment j{question_id, alias_match(prediction, truth), Scorer::AliasOracle, {}, {}};
  double best = 0.0;
  for (const auto& t : truth) best = std::max(best, token_f1(prediction, t));
  j.f1 = best;
  j.payload = j.correct ? "match" : "no_match";
  return j;
}

RemoteJudge::RemoteJudge(remote::Endpoint endpoint)
    : endpoint_(std::move(endpoint)), limiter_(endpoint_.max_in_flight) {}

std::unique_ptr<RemoteJudge> RemoteJudge::from_env() {
  auto e = remote::endpoint_from_env("PRAG_JUDGE_URL");
  if (!e) throw ConfigError("PRAG_JUDGE_URL is not set");
  return std::make_unique<RemoteJudge>(*e);
}

Judgment RemoteJudge::judge(const std::string& question_id, const std::string& question,
                            std::span<const std::string> truth, const std::string& prediction) {
  if (truth.empty()) throw ConfigError("judge: empty truth for " + question_id);
  const nlohmann::json req{{"question", question}, {"truth", truth.front()}, {"prediction", prediction}};
  const std::string line = remote::post_line(endpoint_, req.dump(), &limiter_);
  Judgment j{question_id, false, Scorer::RemoteJudge, line, {}};
  try {
    const auto resp = nlohmann::json::parse(line);
    const auto& c = resp.at("correct");
    if (!c.is_boolean()) throw RemoteError("judge verdict for " + question_id + " is not a boolean");
    j.correct = c.get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw RemoteError("judge response for " + question_id + " is malformed: " + e.what());
  }
  return j;
}

std::unique_ptr<JudgeClient> make_judge(Scorer s) {
  if (s == Scorer::AliasOracle) return std::make_unique<AliasOracle>();
  return RemoteJudge::from_env();
}

std::vector<AccuracyRow> aggregate(std::span<const ScoredItem> items) {
  if (items.empty()) throw ConfigError("aggregate: no judgments");
  struct Acc {
    std::size_t n = 0, correct = 0, n_f1 = 0;
    double f1 = 0.0;
  };
  std::map<std::vector<std::string>, Acc> groups;
  for (const auto& it : items) {
    if (it.keys.size() != items.front().keys.size()) throw ConfigError("aggregate: ragged grouping keys");
    auto& g = groups[it.keys];
    ++g.n;
    g.correct += it.correct ? 1 : 0;
    if (it.f1) {
      ++g.n_f1;
      g.f1 += *it.f1;
    }
  }
  std::vector<AccuracyRow> rows;
  for (const auto& [keys, g] : groups) {
    AccuracyRow r{keys, g.n, g.correct, 100.0 * static_cast<double>(g.correct) / static_cast<double>(g.n), {}};
    if (g.n_f1 > 0) r.mean_f1 = g.f1 / static_cast<double>(g.n_f1);
    rows.push_back(std::move(r));
  }
  return rows;
}

const DivergenceExample& divergence_example() {
  static const DivergenceExample ex{"which university did the physicist attend ?", "University of Washington",
                                    {"University of Chicago"}};
  return ex;
}

}  // namespace prag::eval
