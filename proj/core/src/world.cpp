#include "prag/world.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/prompt.hpp"
#include "prag/rng.hpp"
#include "prag/tokenizer.hpp"

namespace prag::world {

namespace {

using Tokens = std::vector<std::string>;

const std::vector<Relation> kRelations = {
    {"born_in", EntityType::Person, EntityType::City,
     {"{s} was born in {o} .", "{s} is a native of {o} ."},
     {"where was {s} born ?", "in which city was {s} born ?"}},
    {"lives_in", EntityType::Person, EntityType::City,
     {"{s} lives in {o} .", "{s} resides in the city of {o} ."},
     {"where does {s} live ?", "in which city does {s} reside ?"}},
    {"works_for", EntityType::Person, EntityType::Company,
     {"{s} works for {o} .", "{s} is employed by {o} ."},
     {"who does {s} work for ?", "which company employs {s} ?"}},
    {"studied_at", EntityType::Person, EntityType::University,
     {"{s} studied at {o} .", "{s} graduated from {o} ."},
     {"where did {s} study ?", "which university did {s} attend ?"}},
    {"plays", EntityType::Person, EntityType::Instrument,
     {"{s} plays the {o} .", "{s} is a skilled {o} player ."},
     {"which instrument does {s} play ?", "what instrument is {s} known for ?"}},
    {"headquartered_in", EntityType::Company, EntityType::City,
     {"{s} is headquartered in {o} .", "the headquarters of {s} are in {o} ."},
     {"where is {s} headquartered ?", "in which city is {s} based ?"}},
};

const std::vector<std::string> kMultihop = {
    "in which city is the company that employs {s} headquartered ?",
    "where is the employer of {s} based ?",
};

const std::vector<std::string> kPersonFillers = {
    "{s} gave an interview last week .", "{s} spoke at a conference .", "{s} was mentioned in a report .",
    "{s} attended a public event .",     "many people know {s} .",      "{s} shared news with friends .",
};

const std::vector<std::string> kInstruments = {"piano",   "violin",   "cello",    "flute",   "guitar",
                                               "drums",   "harp",     "trumpet",  "oboe",    "clarinet",
                                               "saxophone", "banjo",  "viola",    "tuba",    "accordion",
                                               "mandolin", "bassoon", "trombone", "ukulele", "sitar"};

const std::vector<std::string> kCompanySuffixes = {"labs",  "group",  "systems", "industries",
                                                   "media", "motors", "foods",   "energy"};

std::string fill(const std::string& tmpl, const std::string& s, const std::string& o = {}) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.compare(i, 3, "{s}") == 0) {
      out += s;
      i += 3;
    } else if (tmpl.compare(i, 3, "{o}") == 0) {
      out += o;
      i += 3;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

Tokens split_ws(std::string_view s) {
  Tokens out;
  std::istringstream in{std::string(s)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join(const Tokens& t, std::size_t b, std::size_t e) {
  std::string out;
  for (std::size_t i = b; i < e; ++i) {
    if (i > b) out += ' ';
    out += t[i];
  }
  return out;
}

// Matches sentence tokens against a template; slots take one or more tokens.
bool match(const Tokens& pat, std::size_t pi, const Tokens& s, std::size_t si, std::string& subj, std::string& obj) {
  if (pi == pat.size()) return si == s.size();
  const std::string& p = pat[pi];
  if (p == "{s}" || p == "{o}") {
    for (std::size_t end = si + 1; end <= s.size(); ++end) {
      std::string saved = p == "{s}" ? subj : obj;
      (p == "{s}" ? subj : obj) = join(s, si, end);
      if (match(pat, pi + 1, s, end, subj, obj)) return true;
      (p == "{s}" ? subj : obj) = saved;
    }
    return false;
  }
  return si < s.size() && s[si] == p && match(pat, pi + 1, s, si + 1, subj, obj);
}

std::string pick(const std::vector<std::string>& v, Rng& rng) { return v[rng.below(v.size())]; }

// Pronounceable pseudo-words, unique across the whole world.
class WordMaker {
 public:
  WordMaker(Rng& rng, std::set<std::string> reserved) : rng_(rng), used_(std::move(reserved)) {}

  std::string make() {
    static const std::vector<std::string> onset = {"b",  "d",  "f",  "g",  "k",  "l",  "m",  "n",  "p",  "r", "s",
                                                   "t",  "v",  "z",  "br", "dr", "kr", "tr", "st", "gr", "sh"};
    static const std::vector<std::string> vowel = {"a", "e", "i", "o", "u", "ai", "ou", "ei"};
    static const std::vector<std::string> coda = {"", "", "n", "r", "l", "s", "th", "k", "m"};
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::string w;
      const std::size_t syl = 2 + rng_.below(2);
      for (std::size_t i = 0; i < syl; ++i) w += pick(onset, rng_) + pick(vowel, rng_);
      w += pick(coda, rng_);
      if (used_.insert(w).second) return w;
    }
    throw ConfigError("synthetic world: name space exhausted");
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

std::set<std::string> template_words() {
  std::set<std::string> out;
  auto add = [&](const std::string& s) {
    for (auto& w : split_ws(s)) out.insert(w);
  };
  for (const auto& r : kRelations) {
    for (const auto& t : r.sentences) add(t);
    for (const auto& t : r.questions) add(t);
  }
  for (const auto& t : kMultihop) add(t);
  for (const auto& t : kPersonFillers) add(t);
  for (const auto& t : kInstruments) add(t);
  for (const auto& t : kCompanySuffixes) add(t);
  const inference::PromptTemplate tmpl;
  add(tmpl.instruction + " " + tmpl.passage_marker + " " + tmpl.question_marker + " " + tmpl.answer_marker);
  add("person city company university instrument is a");
  return out;
}

struct PersonProfile {
  std::string name;
  std::vector<Fact> facts;  // person facts, then the employer's headquarters when present
};

std::string render_passage(const std::vector<Fact>& facts, const std::string& subject, Rng& rng, bool filler) {
  std::vector<std::string> sentences;
  for (const auto& f : facts) sentences.push_back(render_sentence(f, rng.below(2)));
  if (filler) {
    const auto pos = rng.below(sentences.size() + 1);
    sentences.insert(sentences.begin() + static_cast<std::ptrdiff_t>(pos), fill(pick(kPersonFillers, rng), subject));
  }
  std::string out;
  for (const auto& s : sentences) out += (out.empty() ? "" : " ") + s;
  return out;
}

std::string qa_text(const std::vector<std::string>& passages, const std::string& q, const std::string& a) {
  return inference::render_prompt(inference::PromptTemplate{}, passages, q) + " " + a;
}

}  // namespace

std::string type_name(EntityType t) {
  switch (t) {
    case EntityType::Person: return "person";
    case EntityType::City: return "city";
    case EntityType::Company: return "company";
    case EntityType::University: return "university";
    case EntityType::Instrument: return "instrument";
  }
  return "?";
}

EntityType parse_type(std::string_view s) {
  for (auto t : {EntityType::Person, EntityType::City, EntityType::Company, EntityType::University,
                 EntityType::Instrument})
    if (type_name(t) == s) return t;
  throw CorruptFileError("unknown entity type '" + std::string(s) + "'");
}

const std::vector<Relation>& relations() { return kRelations; }

const Relation& relation(std::string_view name) {
  for (const auto& r : kRelations)
    if (r.name == name) return r;
  throw ConfigError("unknown relation '" + std::string(name) + "'");
}

const std::vector<std::string>& multihop_questions() { return kMultihop; }

std::string render_sentence(const Fact& fact, std::size_t variant) {
  const auto& r = relation(fact.relation);
  return fill(r.sentences[variant % r.sentences.size()], fact.subject, fact.object);
}

std::string render_question(const Fact& fact, std::size_t variant) {
  const auto& r = relation(fact.relation);
  return fill(r.questions[variant % r.questions.size()], fact.subject);
}

std::string render_multihop_question(const std::string& person, std::size_t variant) {
  return fill(kMultihop[variant % kMultihop.size()], person);
}

std::vector<Fact> parse_facts(std::string_view text) {
  std::vector<Fact> out;
  Tokens sentence;
  auto flush = [&] {
    if (sentence.empty()) return;
    sentence.push_back(".");
    for (const auto& r : kRelations) {
      bool found = false;
      for (const auto& t : r.sentences) {
        std::string s, o;
        if (match(split_ws(t), 0, sentence, 0, s, o)) {
          out.push_back({s, r.name, o});
          found = true;
          break;
        }
      }
      if (found) break;
    }
    sentence.clear();
  };
  for (auto& tok : lm::Tokenizer::segment(text)) {
    if (tok == ".")
      flush();
    else
      sentence.push_back(std::move(tok));
  }
  flush();
  return out;
}

std::vector<std::string> aliases(const std::string& entity, EntityType type) {
  std::vector<std::string> out{entity};
  const auto words = split_ws(entity);
  if ((type == EntityType::Company || type == EntityType::University) && words.size() > 1) out.push_back(words[0]);
  return out;
}

void SyntheticWorldSpec::validate() const {
  if (facts_per_article < 2 || facts_per_article > 6)
    throw ConfigError("world: facts_per_article must be in [2, 6] (5 person relations plus headquarters)");
  if (max_passages < 1 || max_passages > 3) throw ConfigError("world: max_passages must be in [1, 3]");
  if (multihop_depth != 2) throw ConfigError("world: only two-hop questions are supported");
  if (n_articles == 0) throw ConfigError("world: n_articles must be positive");
  if (n_cities < 4 || n_universities < 2 || n_instruments < 2 || n_instruments > kInstruments.size())
    throw ConfigError("world: entity pools too small (or more instruments than available)");
  if (n_known_companies < 2 || n_known_persons < 2) throw ConfigError("world: need at least two known persons/companies");
  if (n_faithfulness > n_known_persons) throw ConfigError("world: n_faithfulness exceeds n_known_persons");
  if (n_multihop > n_articles) throw ConfigError("world: more multihop questions than articles");
  if (task_pool > 0 && n_pool_articles == 0) throw ConfigError("world: task pool needs pool articles");
  const std::size_t persons = n_articles + n_pool_articles + n_known_persons;
  if (persons > 60 * 120) throw ConfigError("world: more persons than the name space allows");
}

std::optional<EntityType> World::type_of(const std::string& entity) const {
  for (const auto& e : entities)
    if (e.name == entity) return e.type;
  return std::nullopt;
}

std::vector<std::string> World::names_of(EntityType type) const {
  std::vector<std::string> out;
  for (const auto& e : entities)
    if (e.type == type) out.push_back(e.name);
  return out;
}

std::string question_type_name(QuestionType t) { return t == QuestionType::Factual ? "factual" : "multihop"; }

QuestionType parse_question_type(std::string_view s) {
  if (s == "factual") return QuestionType::Factual;
  if (s == "multihop") return QuestionType::Multihop;
  throw ConfigError("unknown question type '" + std::string(s) + "'");
}

World gen_synthetic_world(const SyntheticWorldSpec& spec) {
  spec.validate();
  World w;
  w.spec = spec;
  Rng rng(mix_seed(spec.seed, "world"));
  WordMaker words(rng, template_words());

  std::vector<std::string> cities, universities, instruments(kInstruments.begin(),
                                                             kInstruments.begin() + static_cast<std::ptrdiff_t>(spec.n_instruments));
  for (std::size_t i = 0; i < spec.n_cities; ++i) cities.push_back(words.make());
  for (std::size_t i = 0; i < spec.n_universities; ++i) universities.push_back(words.make() + " university");
  std::vector<std::string> first, last;
  for (int i = 0; i < 60; ++i) first.push_back(words.make());
  for (int i = 0; i < 120; ++i) last.push_back(words.make());

  // Distinct full names, shuffled so roles do not cluster by first name.
  std::vector<std::string> names;
  for (const auto& f : first)
    for (const auto& l : last) names.push_back(f + " " + l);
  rng.shuffle(names);
  std::size_t next_name = 0;
  auto take_name = [&] { return names[next_name++]; };

  auto make_company = [&] { return words.make() + " " + pick(kCompanySuffixes, rng); };
  std::vector<std::string> known_companies, news_companies;
  for (std::size_t i = 0; i < spec.n_known_companies; ++i) known_companies.push_back(make_company());

  for (const auto& c : cities) w.entities.push_back({c, EntityType::City});
  for (const auto& u : universities) w.entities.push_back({u, EntityType::University});
  for (const auto& i : instruments) w.entities.push_back({i, EntityType::Instrument});
  for (const auto& c : known_companies) w.entities.push_back({c, EntityType::Company});

  std::map<std::string, std::string> hq;
  for (const auto& c : known_companies) {
    hq[c] = pick(cities, rng);
    w.known_facts.push_back({c, "headquartered_in", hq[c]});
  }

  auto person_facts = [&](const std::string& p, const std::string& company) {
    return std::vector<Fact>{{p, "born_in", pick(cities, rng)},
                             {p, "lives_in", pick(cities, rng)},
                             {p, "works_for", company},
                             {p, "studied_at", pick(universities, rng)},
                             {p, "plays", pick(instruments, rng)}};
  };

  // Known persons: facts go into pretraining.
  std::vector<PersonProfile> known;
  for (std::size_t i = 0; i < spec.n_known_persons; ++i) {
    PersonProfile p{take_name(), {}};
    p.facts = person_facts(p.name, pick(known_companies, rng));
    for (const auto& f : p.facts) w.known_facts.push_back(f);
    w.entities.push_back({p.name, EntityType::Person});
    known.push_back(std::move(p));
  }

  // Held-out articles: evaluation articles first, then the task pool.
  struct Article {
    std::string id;
    PersonProfile person;
    std::string company;
    std::vector<std::vector<Fact>> passages;
    std::vector<std::string> doc_ids;
  };
  std::vector<Article> articles;
  const std::size_t n_total = spec.n_articles + spec.n_pool_articles;
  for (std::size_t i = 0; i < n_total; ++i) {
    Article a;
    const bool pool = i >= spec.n_articles;
    const std::size_t idx = pool ? i - spec.n_articles : i;
    a.id = (pool ? "t" : "n") + std::to_string(1000 + idx).substr(1);
    a.person.name = take_name();
    a.company = make_company();
    news_companies.push_back(a.company);
    w.entities.push_back({a.person.name, EntityType::Person});
    w.entities.push_back({a.company, EntityType::Company});
    auto all = person_facts(a.person.name, a.company);
    const Fact hq_fact{a.company, "headquartered_in", pick(cities, rng)};
    // Keep works_for and the headquarters fact; fill up with other person facts.
    std::vector<Fact> chosen{all[2], hq_fact};
    std::vector<Fact> others{all[0], all[1], all[3], all[4]};
    rng.shuffle(others);
    for (std::size_t k = 0; chosen.size() < spec.facts_per_article; ++k) chosen.push_back(others[k]);
    for (const auto& f : chosen) w.heldout_facts.push_back(f);

    std::size_t n_pass = std::min<std::size_t>(spec.max_passages, 2 + rng.below(2));
    n_pass = std::min(n_pass, chosen.size());
    a.passages.assign(n_pass, {});
    // works_for and headquarters land in different passages when possible.
    std::vector<Fact> rest(chosen.begin() + 2, chosen.end());
    rng.shuffle(rest);
    std::vector<std::size_t> slots(n_pass);
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    rng.shuffle(slots);
    a.passages[slots[0]].push_back(chosen[0]);
    a.passages[n_pass > 1 ? slots[1] : slots[0]].push_back(chosen[1]);
    for (const auto& f : rest) {
      auto smallest = std::min_element(a.passages.begin(), a.passages.end(),
                                       [](const auto& x, const auto& y) { return x.size() < y.size(); });
      smallest->push_back(f);
    }
    for (auto& p : a.passages) rng.shuffle(p);
    a.person.facts = chosen;
    for (std::size_t j = 0; j < n_pass; ++j) {
      Document d{a.id + "-p" + std::to_string(j), a.id, a.person.name,
                 render_passage(a.passages[j], a.person.name, rng, rng.uniform() < 0.5)};
      a.doc_ids.push_back(d.id);
      w.corpus.push_back(std::move(d));
    }
    articles.push_back(std::move(a));
  }

  // Evaluation questions.
  auto passage_of = [](const Article& a, const Fact& f) {
    for (std::size_t j = 0; j < a.passages.size(); ++j)
      if (std::find(a.passages[j].begin(), a.passages[j].end(), f) != a.passages[j].end()) return a.doc_ids[j];
    throw ConfigError("world: fact without passage");
  };
  auto factual_record = [&](const Article& a, const Fact& f, const std::string& id, const std::string& split) {
    DatasetRecord r;
    r.id = id;
    r.question = render_question(f, rng.below(2));
    r.answers = aliases(f.object, relation(f.relation).object);
    r.gold = {passage_of(a, f)};
    r.type = QuestionType::Factual;
    r.article_id = a.id;
    r.split = split;
    return r;
  };
  for (std::size_t q = 0; q < spec.n_factual; ++q) {
    const Article& a = articles[q % spec.n_articles];
    const Fact& f = a.person.facts[rng.below(a.person.facts.size())];
    w.records.push_back(factual_record(a, f, "f" + std::to_string(10000 + q).substr(1), "eval"));
  }
  std::vector<std::size_t> mh(spec.n_articles);
  std::iota(mh.begin(), mh.end(), std::size_t{0});
  rng.shuffle(mh);
  mh.resize(spec.n_multihop);
  std::sort(mh.begin(), mh.end());
  for (std::size_t q = 0; q < mh.size(); ++q) {
    const Article& a = articles[mh[q]];
    DatasetRecord r;
    r.id = "m" + std::to_string(10000 + q).substr(1);
    r.question = render_multihop_question(a.person.name, rng.below(kMultihop.size()));
    const Fact& hqf = a.person.facts[1];
    r.answers = aliases(hqf.object, EntityType::City);
    r.gold = {passage_of(a, a.person.facts[0])};
    if (passage_of(a, hqf) != r.gold[0]) r.gold.push_back(passage_of(a, hqf));
    r.type = QuestionType::Multihop;
    r.article_id = a.id;
    r.split = "eval";
    w.records.push_back(std::move(r));
  }
  // Task pool: questions over the pool articles, never over evaluation articles.
  for (std::size_t q = 0; q < spec.task_pool; ++q) {
    const Article& a = articles[spec.n_articles + q % spec.n_pool_articles];
    const Fact& f = a.person.facts[rng.below(a.person.facts.size())];
    w.records.push_back(factual_record(a, f, "t" + std::to_string(10000 + q).substr(1), "task_pool"));
  }

  // Faithfulness: one true passage per known person, then a counterfactual edit.
  for (std::size_t i = 0; i < spec.n_faithfulness; ++i) {
    const PersonProfile& p = known[i];
    std::vector<Fact> facts = p.facts;
    rng.shuffle(facts);
    facts.resize(2 + rng.below(2));
    Document d{"k" + std::to_string(1000 + i).substr(1) + "-p0", "k" + std::to_string(1000 + i).substr(1), p.name,
               render_passage(facts, p.name, rng, false)};
    const Fact& f = facts[rng.below(facts.size())];
    DatasetRecord r;
    r.id = "c" + std::to_string(10000 + i).substr(1);
    r.question = render_question(f, rng.below(2));
    r.answers = aliases(f.object, relation(f.relation).object);
    r.gold = {d.id};
    r.type = QuestionType::Factual;
    r.article_id = d.article_id;
    r.split = "faithfulness";
    w.corpus.push_back(d);
    w.records.push_back(std::move(r));
  }
  for (auto& r : w.records) {
    if (r.split != "faithfulness") continue;
    std::vector<Document> gold;
    for (const auto& d : w.corpus)
      if (std::find(r.gold.begin(), r.gold.end(), d.id) != r.gold.end()) gold.push_back(d);
    r.counterfactual = gen_counterfactual(r, w, gold, mix_seed(spec.seed, r.id));
  }

  // Pretraining sequences.
  std::vector<std::string> roster;
  for (const auto& e : w.entities) roster.push_back(e.name + " is a " + type_name(e.type) + " .");
  for (std::size_t pass = 0; pass < spec.roster_passes; ++pass) {
    rng.shuffle(roster);
    for (std::size_t i = 0; i < roster.size(); i += 8) {
      std::string chunk;
      for (std::size_t j = i; j < std::min(roster.size(), i + 8); ++j) chunk += (chunk.empty() ? "" : " ") + roster[j];
      w.pretraining.push_back(chunk);
    }
  }
  auto known_bio = [&](const PersonProfile& p) {
    std::vector<Fact> facts = p.facts;
    if (rng.uniform() < 0.5) facts.push_back({p.facts[2].object, "headquartered_in", hq[p.facts[2].object]});
    rng.shuffle(facts);
    return render_passage(facts, p.name, rng, rng.uniform() < 0.5);
  };
  for (const auto& p : known)
    for (std::size_t v = 0; v < spec.bio_variants; ++v) w.pretraining.push_back(known_bio(p));
  for (const auto& c : known_companies)
    for (std::size_t v = 0; v < 2; ++v) w.pretraining.push_back(render_sentence({c, "headquartered_in", hq[c]}, v));

  // Closed-book QA over known facts.
  for (const auto& f : w.known_facts)
    for (std::size_t v = 0; v < 2; ++v) w.pretraining.push_back(qa_text({}, render_question(f, v), f.object));
  for (const auto& p : known)
    for (std::size_t v = 0; v < kMultihop.size(); ++v)
      w.pretraining.push_back(qa_text({}, render_multihop_question(p.name, v), hq[p.facts[2].object]));

  // Open-book QA: answers must be read from the passages. Subjects are fresh
  // names never used elsewhere, so no held-out triple can be stated.
  auto fresh_name = [&] { return names[next_name + rng.below(names.size() - next_name)]; };
  std::vector<std::string> all_companies = known_companies;
  all_companies.insert(all_companies.end(), news_companies.begin(), news_companies.end());
  for (std::size_t n = 0; n < spec.n_openbook; ++n) {
    std::vector<std::string> passages;
    std::string question, answer;
    const double kind = rng.uniform();
    const std::size_t k = kind < 0.3 ? 1 : kind < 0.5 ? 2 : 3;
    const double u = rng.uniform();
    if (u < 0.8) {
      // Ephemeral person.
      const std::string name = fresh_name();
      auto facts = person_facts(name, pick(all_companies, rng));
      rng.shuffle(facts);
      facts.resize(1 + rng.below(3));
      const Fact f = facts[rng.below(facts.size())];
      passages.push_back(render_passage(facts, name, rng, rng.uniform() < 0.3));
      question = render_question(f, rng.below(2));
      answer = f.object;
    } else if (u < 0.9) {
      // Known person, consistent passage.
      const auto& p = known[rng.below(known.size())];
      auto facts = p.facts;
      rng.shuffle(facts);
      facts.resize(1 + rng.below(3));
      const Fact f = facts[rng.below(facts.size())];
      passages.push_back(render_passage(facts, p.name, rng, rng.uniform() < 0.3));
      question = render_question(f, rng.below(2));
      answer = f.object;
    } else {
      // Two-hop over an ephemeral employee of a known company.
      const std::string name = fresh_name();
      const std::string c = pick(known_companies, rng);
      passages.push_back(render_sentence({name, "works_for", c}, rng.below(2)));
      passages.push_back(render_sentence({c, "headquartered_in", hq[c]}, rng.below(2)));
      question = render_multihop_question(name, rng.below(kMultihop.size()));
      answer = hq[c];
    }
    while (passages.size() < k) {
      const std::string name = fresh_name();
      auto facts = person_facts(name, pick(all_companies, rng));
      rng.shuffle(facts);
      facts.resize(1 + rng.below(3));
      passages.push_back(render_passage(facts, name, rng, rng.uniform() < 0.3));
    }
    rng.shuffle(passages);
    w.pretraining.push_back(qa_text(passages, question, answer));
  }
  // Drop any ephemeral text that collides with a held-out statement.
  std::set<std::string> banned;
  for (const auto& f : w.heldout_facts)
    for (std::size_t v = 0; v < 2; ++v) banned.insert(render_sentence(f, v));
  std::erase_if(w.pretraining, [&](const std::string& s) {
    return std::any_of(banned.begin(), banned.end(), [&](const std::string& b) { return s.find(b) != std::string::npos; });
  });
  rng.shuffle(w.pretraining);
  return w;
}

CounterfactualBundle gen_counterfactual(const DatasetRecord& record, const World& world,
                                        const std::vector<Document>& gold_passages, std::uint64_t seed) {
  if (gold_passages.empty()) throw ConfigError("gen_counterfactual: record " + record.id + " has no gold passages");
  const std::string original = record.answers.front();
  const auto type = world.type_of(original);
  if (!type) throw ConfigError("gen_counterfactual: answer '" + original + "' is not a known entity");
  std::vector<std::string> pool;
  for (const auto& n : world.names_of(*type)) {
    if (n == original) continue;
    bool appears = false;
    for (const auto& d : gold_passages) appears |= d.text.find(n) != std::string::npos;
    if (!appears) pool.push_back(n);
  }
  if (pool.empty()) throw ConfigError("gen_counterfactual: no same-type substitute for '" + original + "'");
  Rng rng(seed);
  const std::string sub = pool[rng.below(pool.size())];

  CounterfactualBundle b;
  const Tokens from = split_ws(original), to = split_ws(sub);
  bool replaced = false;
  for (const auto& d : gold_passages) {
    Tokens t = split_ws(d.text), out;
    for (std::size_t i = 0; i < t.size();) {
      if (i + from.size() <= t.size() && std::equal(from.begin(), from.end(), t.begin() + static_cast<std::ptrdiff_t>(i))) {
        out.insert(out.end(), to.begin(), to.end());
        i += from.size();
        replaced = true;
      } else {
        out.push_back(t[i++]);
      }
    }
    b.passages.push_back({"cf-" + record.id + "-" + d.id, "cf-" + record.id, d.title, join(out, 0, out.size())});
  }
  if (!replaced) throw ConfigError("gen_counterfactual: answer of " + record.id + " does not occur in its gold passages");
  b.counterfactual_answers = aliases(sub, *type);
  b.original_answers = record.answers;
  return b;
}

std::string corpus_to_ndjson(const std::vector<Document>& docs) {
  std::string out;
  for (const auto& d : docs)
    out += nlohmann::json{{"id", d.id}, {"article_id", d.article_id}, {"title", d.title}, {"text", d.text}}.dump() + "\n";
  return out;
}

namespace {

template <typename F>
void for_each_line(std::string_view text, const std::string& what, F&& f) {
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFileError(what + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<Document> corpus_from_ndjson(std::string_view text) {
  std::vector<Document> docs;
  std::set<std::string> seen;
  for_each_line(text, "corpus", [&](const nlohmann::json& j) {
    Document d{j.at("id").get<std::string>(), j.value("article_id", j.at("id").get<std::string>()),
               j.value("title", std::string()), j.at("text").get<std::string>()};
    if (d.text.empty()) throw ConfigError("corpus: document " + d.id + " has empty text");
    if (!seen.insert(d.id).second) throw ConfigError("corpus: duplicate document id " + d.id);
    docs.push_back(std::move(d));
  });
  return docs;
}

std::string records_to_ndjson(const std::vector<DatasetRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j{{"id", r.id},
                     {"question", r.question},
                     {"answers", r.answers},
                     {"gold", r.gold},
                     {"type", question_type_name(r.type)},
                     {"article_id", r.article_id},
                     {"split", r.split}};
    if (r.counterfactual) {
      nlohmann::json ps = nlohmann::json::array();
      for (const auto& d : r.counterfactual->passages)
        ps.push_back({{"id", d.id}, {"article_id", d.article_id}, {"title", d.title}, {"text", d.text}});
      j["counterfactual"] = {{"passages", ps},
                             {"counterfactual_answers", r.counterfactual->counterfactual_answers},
                             {"original_answers", r.counterfactual->original_answers}};
    }
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<DatasetRecord> records_from_ndjson(std::string_view text) {
  std::vector<DatasetRecord> out;
  for_each_line(text, "dataset", [&](const nlohmann::json& j) {
    DatasetRecord r;
    r.id = j.at("id").get<std::string>();
    r.question = j.at("question").get<std::string>();
    r.answers = j.at("answers").get<std::vector<std::string>>();
    r.gold = j.value("gold", std::vector<std::string>{});
    r.type = parse_question_type(j.value("type", std::string("factual")));
    r.article_id = j.value("article_id", std::string());
    r.split = j.value("split", std::string("eval"));
    if (r.answers.empty()) throw ConfigError("dataset: record " + r.id + " has no answers");
    if (j.contains("counterfactual")) {
      CounterfactualBundle b;
      const auto& c = j.at("counterfactual");
      for (const auto& p : c.at("passages"))
        b.passages.push_back({p.at("id").get<std::string>(), p.value("article_id", std::string()),
                              p.value("title", std::string()), p.at("text").get<std::string>()});
      b.counterfactual_answers = c.at("counterfactual_answers").get<std::vector<std::string>>();
      b.original_answers = c.at("original_answers").get<std::vector<std::string>>();
      r.counterfactual = std::move(b);
    }
    out.push_back(std::move(r));
  });
  return out;
}

void save_world(const World& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string pre;
  for (const auto& s : world.pretraining) pre += s + "\n";
  io::write_file_atomic(dir / "pretrain.txt", pre);
  io::write_file_atomic(dir / "corpus.jsonl", corpus_to_ndjson(world.corpus));
  io::write_file_atomic(dir / "dataset.jsonl", records_to_ndjson(world.records));
  std::string ents;
  for (const auto& e : world.entities) ents += e.name + "\t" + type_name(e.type) + "\n";
  io::write_file_atomic(dir / "entities.tsv", ents);
  auto facts_tsv = [](const std::vector<Fact>& fs) {
    std::string out;
    for (const auto& f : fs) out += f.subject + "\t" + f.relation + "\t" + f.object + "\n";
    return out;
  };
  io::write_file_atomic(dir / "known_facts.tsv", facts_tsv(world.known_facts));
  io::write_file_atomic(dir / "heldout_facts.tsv", facts_tsv(world.heldout_facts));
}

World load_world(const std::filesystem::path& dir) {
  World w;
  auto lines = [](const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);)
      if (!l.empty()) out.push_back(l);
    return out;
  };
  auto fields = [](const std::string& line, std::size_t n, const std::string& what) {
    std::vector<std::string> out;
    std::size_t b = 0;
    for (std::size_t e; (e = line.find('\t', b)) != std::string::npos; b = e + 1) out.push_back(line.substr(b, e - b));
    out.push_back(line.substr(b));
    if (out.size() != n) throw CorruptFileError(what + ": malformed line '" + line + "'");
    return out;
  };
  w.pretraining = lines(io::read_file(dir / "pretrain.txt"));
  w.corpus = corpus_from_ndjson(io::read_file(dir / "corpus.jsonl"));
  w.records = records_from_ndjson(io::read_file(dir / "dataset.jsonl"));
  for (const auto& l : lines(io::read_file(dir / "entities.tsv"))) {
    auto f = fields(l, 2, "entities.tsv");
    w.entities.push_back({f[0], parse_type(f[1])});
  }
  for (const auto& l : lines(io::read_file(dir / "known_facts.tsv"))) {
    auto f = fields(l, 3, "known_facts.tsv");
    w.known_facts.push_back({f[0], f[1], f[2]});
  }
  for (const auto& l : lines(io::read_file(dir / "heldout_facts.tsv"))) {
    auto f = fields(l, 3, "heldout_facts.tsv");
    w.heldout_facts.push_back({f[0], f[1], f[2]});
  }
  return w;
}

}  // namespace prag::world
