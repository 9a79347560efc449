#include "prag/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "prag/analysis.hpp"
#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/rng.hpp"

namespace prag::harness {

using nlohmann::json;

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      const auto b = cur.find_first_not_of(" \t"), e = cur.find_last_not_of(" \t");
      if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  return out;
}

template <typename T, typename F>
std::string join_names(const std::vector<T>& xs, F name) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : ",") + name(x);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw ConfigError("config: " + key + " must be a boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_floating_point_v<T>)
      out = static_cast<T>(std::stod(v, &used));
    else if constexpr (std::is_signed_v<T>)
      out = static_cast<T>(std::stoll(v, &used));
    else {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<T>(std::stoull(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::logic_error&) {
    throw ConfigError("config: " + key + " has invalid value '" + v + "'");
  }
}

std::string read_text(const fs::path& p) { return io::read_file(p); }

json parse_line(const std::string& line, const std::string& what) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw CorruptFileError(what + ": " + e.what());
  }
}

std::vector<json> read_ndjson(const fs::path& p) {
  std::vector<json> out;
  std::istringstream in(io::read_file(p));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(parse_line(line, p.string()));
  return out;
}

std::size_t mode_rank(const std::string& m) {
  const auto& all = inference::all_modes();
  for (std::size_t i = 0; i < all.size(); ++i)
    if (inference::mode_name(all[i]) == m) return i;
  return all.size();
}

std::size_t noise_rank(const std::string& n) {
  const auto& all = retrieval::all_noise_conditions();
  for (std::size_t i = 0; i < all.size(); ++i)
    if (retrieval::noise_name(all[i]) == n) return i;
  return all.size();
}

}  // namespace

lm::Tokenizer world_tokenizer(const world::World& w) {
  std::vector<std::string> texts = w.pretraining;
  for (const auto& d : w.corpus) texts.push_back(d.title + " " + d.text);
  for (const auto& r : w.records) {
    texts.push_back(r.question);
    for (const auto& a : r.answers) texts.push_back(a);
    if (r.counterfactual) {
      for (const auto& d : r.counterfactual->passages) texts.push_back(d.text);
      for (const auto& a : r.counterfactual->counterfactual_answers) texts.push_back(a);
    }
  }
  texts.push_back(inference::render_prompt({}, {}, ""));
  return lm::Tokenizer::build(texts);
}

lm::ModelConfig default_model_config(std::int32_t vocab_size) {
  lm::ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

std::string source_name(PassageSource s) { return s == PassageSource::Retrieved ? "retrieved" : "gold"; }

PassageSource parse_source(std::string_view s) {
  if (s == "retrieved") return PassageSource::Retrieved;
  if (s == "gold") return PassageSource::Gold;
  throw ConfigError("unknown passage source '" + std::string(s) + "'");
}

std::string probe_name(Probe p) {
  switch (p) {
    case Probe::Off: return "off";
    case Probe::On: return "on";
    case Probe::Both: return "both";
  }
  return "?";
}

Probe parse_probe(std::string_view s) {
  if (s == "off") return Probe::Off;
  if (s == "on") return Probe::On;
  if (s == "both") return Probe::Both;
  throw ConfigError("unknown probe setting '" + std::string(s) + "'");
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const fs::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  static const std::map<std::string, std::set<std::string>> known = {
      {"paths", {"world", "model", "tokenizer", "adapters", "output"}},
      {"run",
       {"modes", "noise", "types", "k", "passage_source", "probe", "max_questions", "pks", "faithfulness",
        "faithfulness_questions", "similarity", "scorer", "threads", "seed", "max_failure_fraction", "max_new"}},
      {"lora", {"preset", "rank", "alpha", "lr", "epochs", "n_rewrites", "n_qa", "answer_only", "clip_norm", "seed",
                "augmentor"}},
      {"task_lora", {"questions"}}};
  for (const auto& [section, body] : tree) {
    auto it = known.find(section);
    if (it == known.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, v] : body)
      if (!it->second.contains(key)) throw ConfigError("config: unknown key " + section + "." + key);
  }
  auto get = [&](const std::string& path) -> std::optional<std::string> {
    auto v = tree.get_optional<std::string>(pt::ptree::path_type(path, '.'));
    if (!v) return std::nullopt;
    return *v;
  };
  auto path_of = [&](const std::string& key) -> fs::path {
    auto v = get(key);
    if (!v || v->empty()) return {};
    fs::path p(*v);
    return p.is_absolute() ? p : (base_dir / p).lexically_normal();
  };

  ExperimentConfig c;
  c.world = path_of("paths.world");
  c.model = path_of("paths.model");
  c.tokenizer = path_of("paths.tokenizer");
  if (c.tokenizer.empty() && !c.model.empty()) c.tokenizer = c.model.parent_path() / "vocab.txt";
  c.adapters = path_of("paths.adapters");
  c.output = path_of("paths.output");

  if (auto v = get("run.modes")) {
    c.modes.clear();
    for (const auto& m : split_list(*v)) c.modes.push_back(inference::parse_mode(m));
  }
  if (auto v = get("run.noise")) {
    c.noise.clear();
    for (const auto& n : split_list(*v)) c.noise.push_back(retrieval::parse_noise(n));
  }
  if (auto v = get("run.types")) {
    c.types.clear();
    for (const auto& t : split_list(*v)) c.types.push_back(world::parse_question_type(t));
  }
  if (auto v = get("run.k")) c.k = parse_number<std::size_t>("run.k", *v);
  if (auto v = get("run.passage_source")) c.source = parse_source(*v);
  if (auto v = get("run.probe")) c.probe = parse_probe(*v);
  if (auto v = get("run.max_questions")) c.max_questions = parse_number<std::size_t>("run.max_questions", *v);
  if (auto v = get("run.pks")) c.pks = parse_bool("run.pks", *v);
  if (auto v = get("run.faithfulness")) c.faithfulness = parse_bool("run.faithfulness", *v);
  if (auto v = get("run.faithfulness_questions"))
    c.faithfulness_questions = parse_number<std::size_t>("run.faithfulness_questions", *v);
  if (auto v = get("run.similarity")) c.similarity = parse_bool("run.similarity", *v);
  if (auto v = get("run.scorer")) c.scorer = eval::parse_scorer(*v);
  if (auto v = get("run.threads")) c.threads = parse_number<std::size_t>("run.threads", *v);
  if (auto v = get("run.seed")) c.seed = parse_number<std::uint64_t>("run.seed", *v);
  if (auto v = get("run.max_failure_fraction"))
    c.max_failure_fraction = parse_number<double>("run.max_failure_fraction", *v);
  if (auto v = get("run.max_new")) c.max_new = parse_number<std::size_t>("run.max_new", *v);

  if (auto v = get("lora.preset")) c.preset = *v;
  c.hyper = param::lora_preset(c.preset);
  if (auto v = get("lora.rank")) c.hyper.rank = parse_number<std::int32_t>("lora.rank", *v);
  if (auto v = get("lora.alpha")) c.hyper.alpha = parse_number<float>("lora.alpha", *v);
  if (auto v = get("lora.lr")) c.hyper.lr = parse_number<float>("lora.lr", *v);
  if (auto v = get("lora.epochs")) c.hyper.epochs = parse_number<std::int32_t>("lora.epochs", *v);
  if (auto v = get("lora.n_rewrites")) c.hyper.n_rewrites = parse_number<std::size_t>("lora.n_rewrites", *v);
  if (auto v = get("lora.n_qa")) c.hyper.n_qa = parse_number<std::size_t>("lora.n_qa", *v);
  if (auto v = get("lora.answer_only")) c.hyper.answer_only = parse_bool("lora.answer_only", *v);
  if (auto v = get("lora.clip_norm")) c.hyper.clip_norm = parse_number<float>("lora.clip_norm", *v);
  if (auto v = get("lora.seed")) c.hyper.seed = parse_number<std::uint64_t>("lora.seed", *v);
  if (auto v = get("lora.augmentor")) c.augmentor = *v;
  if (auto v = get("task_lora.questions")) c.task_questions = parse_number<std::size_t>("task_lora.questions", *v);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse(read_text(path), fs::absolute(path).parent_path());
}

void ExperimentConfig::validate() const {
  auto need = [](const fs::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError("config: " + what + " is not set");
    if (!fs::exists(p)) throw ConfigError("config: " + what + " " + p.string() + " does not exist");
  };
  need(world, "paths.world");
  need(world / "corpus.jsonl", "corpus");
  need(world / "dataset.jsonl", "dataset");
  need(model, "paths.model");
  need(tokenizer, "paths.tokenizer");
  if (adapters.empty()) throw ConfigError("config: paths.adapters is not set");
  if (output.empty()) throw ConfigError("config: paths.output is not set");
  if (k < 1) throw ConfigError("config: k must be >= 1");
  if (modes.empty()) throw ConfigError("config: no modes");
  if (noise.empty()) throw ConfigError("config: no noise conditions");
  if (types.empty()) throw ConfigError("config: no question types");
  if (threads < 1) throw ConfigError("config: threads must be >= 1");
  if (max_new < 1) throw ConfigError("config: max_new must be >= 1");
  if (!(max_failure_fraction >= 0.0 && max_failure_fraction <= 1.0))
    throw ConfigError("config: max_failure_fraction must lie in [0, 1]");
  if (augmentor != "synthetic" && augmentor != "remote")
    throw ConfigError("config: augmentor must be synthetic or remote");
  if (hyper.rank < 1) throw ConfigError("config: lora.rank must be >= 1");
  if (hyper.epochs < 0) throw ConfigError("config: lora.epochs must be >= 0");
  if (!(hyper.lr > 0.0f)) throw ConfigError("config: lora.lr must be positive");
  if (probe != Probe::Off && task_questions < 1) throw ConfigError("config: task_lora.questions must be >= 1");
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream o;
  o << "world=" << world.string() << "\nmodel=" << model.string() << "\ntokenizer=" << tokenizer.string()
    << "\nadapters=" << adapters.string() << "\noutput=" << output.string()
    << "\nmodes=" << join_names(modes, inference::mode_name)
    << "\nnoise=" << join_names(noise, retrieval::noise_name)
    << "\ntypes=" << join_names(types, world::question_type_name) << "\nk=" << k
    << "\npassage_source=" << source_name(source) << "\nprobe=" << probe_name(probe)
    << "\nmax_questions=" << max_questions << "\npks=" << pks << "\nfaithfulness=" << faithfulness
    << "\nfaithfulness_questions=" << faithfulness_questions << "\nsimilarity=" << similarity
    << "\nscorer=" << eval::scorer_name(scorer) << "\nthreads=" << threads << "\nseed=" << seed
    << "\nmax_failure_fraction=" << fixed(max_failure_fraction, 6) << "\nmax_new=" << max_new
    << "\nlora=" << hyper.describe() << "\npreset=" << preset << "\naugmentor=" << augmentor
    << "\ntask_questions=" << task_questions << "\n";
  return o.str();
}

std::string ExperimentConfig::hash() const { return io::sha256_hex(canonical()); }

std::unique_ptr<param::Augmentor> make_augmentor(const std::string& name, std::uint64_t seed) {
  if (name == "synthetic") return std::make_unique<param::SyntheticAugmentor>(seed);
  if (name == "remote") return param::RemoteAugmentor::from_env();
  throw ConfigError("unknown augmentor '" + name + "'");
}

lora::LoraAdapter train_task_lora(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                                  std::span<const world::DatasetRecord> records,
                                  std::span<const world::Document> corpus, param::Augmentor& augmentor,
                                  const param::LoraHyper& hyper, std::span<const world::DatasetRecord> eval_records,
                                  param::LoraTrainReport* report) {
  if (records.empty()) throw ConfigError("train_task_lora: no training questions");
  std::set<std::string> eval_ids, eval_articles;
  for (const auto& r : eval_records) {
    eval_ids.insert(r.id);
    eval_articles.insert(r.article_id);
  }
  std::set<std::string> doc_ids;
  for (const auto& r : records) {
    if (eval_ids.contains(r.id)) throw ConfigError("train_task_lora: question " + r.id + " is also an eval question");
    if (!r.article_id.empty() && eval_articles.contains(r.article_id))
      throw ConfigError("train_task_lora: question " + r.id + " shares article " + r.article_id + " with the eval set");
    if (r.gold.empty()) throw ConfigError("train_task_lora: question " + r.id + " has no gold passages");
    doc_ids.insert(r.gold.begin(), r.gold.end());
  }
  std::vector<param::AugmentedDataset> datasets;
  for (const auto& id : doc_ids) {
    auto it = std::find_if(corpus.begin(), corpus.end(), [&](const auto& d) { return d.id == id; });
    if (it == corpus.end()) throw ConfigError("train_task_lora: gold passage " + id + " is not in the corpus");
    datasets.push_back(param::build_dataset(*it, augmentor, hyper.n_rewrites, hyper.n_qa));
  }
  std::vector<const param::AugmentedDataset*> ptrs;
  for (const auto& d : datasets) ptrs.push_back(&d);
  return param::train_lora(model, tok, ptrs, hyper, "task", report);
}

namespace {

struct Item {
  std::string question_id;
  std::string study;  // "main" or "faithfulness"
  std::string type;
  std::string noise;
  std::string probe;
  inference::Mode mode;
  std::vector<std::string> passage_ids;
};

struct ItemResult {
  Item item;
  std::optional<inference::AnswerRecord> answer;
  std::optional<eval::Judgment> judgment;
  std::string answer_class;
  std::optional<analysis::PksProfile> pks;
  std::string error;
};

bool item_less(const ItemResult& a, const ItemResult& b) {
  auto key = [](const ItemResult& r) {
    return std::make_tuple(r.item.study, r.item.question_id, r.item.probe, noise_rank(r.item.noise),
                           mode_rank(inference::mode_name(r.item.mode)));
  };
  return key(a) < key(b);
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config, const Progress& progress) {
  config.validate();
  auto note = [&](const std::string& stage, std::size_t done, std::size_t total) {
    if (progress) progress(stage, done, total);
  };

  const auto tok = lm::Tokenizer::load(config.tokenizer);
  const auto model = lm::load_checkpoint(config.model);
  if (static_cast<std::size_t>(model.config().vocab_size) != tok.size())
    throw ConfigError("model vocabulary (" + std::to_string(model.config().vocab_size) +
                      ") does not match the tokenizer (" + std::to_string(tok.size()) + ")");
  const auto corpus = world::corpus_from_ndjson(read_text(config.world / "corpus.jsonl"));
  const auto records = world::records_from_ndjson(read_text(config.world / "dataset.jsonl"));
  std::map<std::string, const world::Document*> doc_by_id;
  for (const auto& d : corpus) doc_by_id[d.id] = &d;
  for (const auto& r : records)
    for (const auto& g : r.gold)
      if (!doc_by_id.contains(g)) throw ConfigError("dataset: gold passage " + g + " of " + r.id + " is missing");
  const auto index = retrieval::build_index(corpus);

  // Question selection.
  std::vector<world::DatasetRecord> eval_records;
  std::map<world::QuestionType, std::size_t> taken;
  for (const auto& r : records) {
    if (r.split != "eval" || std::find(config.types.begin(), config.types.end(), r.type) == config.types.end())
      continue;
    if (config.max_questions > 0 && taken[r.type] >= config.max_questions) continue;
    ++taken[r.type];
    eval_records.push_back(r);
  }
  std::vector<world::DatasetRecord> cf_records;
  if (config.faithfulness)
    for (const auto& r : records)
      if (r.split == "faithfulness" && r.counterfactual &&
          (config.faithfulness_questions == 0 || cf_records.size() < config.faithfulness_questions))
        cf_records.push_back(r);
  if (eval_records.empty() && cf_records.empty()) throw ConfigError("run: no questions selected");

  std::vector<std::string> probes;
  if (config.probe != Probe::On) probes.push_back("off");
  if (config.probe != Probe::Off) probes.push_back("on");

  // Passage lists per (question, noise).
  std::vector<Item> items;
  std::set<std::string> needed;
  for (const auto& r : eval_records) {
    std::vector<std::string> base;
    if (config.source == PassageSource::Gold) {
      base = r.gold;
    } else {
      for (const auto& h : retrieval::retrieve(index, r.question, config.k).hits) base.push_back(h.doc_id);
    }
    for (auto cond : config.noise) {
      const auto ids = retrieval::inject_noise(base, cond, index, r.article_id,
                                               mix_seed(config.seed, r.id + "/" + retrieval::noise_name(cond)));
      needed.insert(ids.begin(), ids.end());
      for (const auto& p : probes)
        for (auto m : config.modes)
          items.push_back({r.id, "main", world::question_type_name(r.type), retrieval::noise_name(cond), p, m, ids});
    }
  }
  std::vector<world::Document> cf_docs;
  for (const auto& r : cf_records) {
    std::vector<std::string> ids;
    for (const auto& d : r.counterfactual->passages) {
      ids.push_back(d.id);
      cf_docs.push_back(d);
    }
    for (auto m : config.modes) items.push_back({r.id, "faithfulness", "factual", "counterfactual", "off", m, ids});
  }
  std::set<std::string> eval_articles;
  for (const auto& r : eval_records) eval_articles.insert(r.article_id);
  if (config.similarity)
    for (const auto& d : corpus)
      if (eval_articles.contains(d.article_id)) needed.insert(d.id);

  // Parameterization of every needed document.
  auto augmentor = make_augmentor(config.augmentor, config.seed);
  const lora::AdapterStore store(config.adapters);
  std::vector<world::Document> to_param;
  for (const auto& id : needed) to_param.push_back(*doc_by_id.at(id));
  to_param.insert(to_param.end(), cf_docs.begin(), cf_docs.end());
  const auto preport = param::parameterize_corpus(model, tok, to_param, *augmentor, config.hyper, store,
                                                  config.threads,
                                                  [&](std::size_t d, std::size_t t) { note("parameterize", d, t); });
  std::map<std::string, lora::LoraAdapter> adapters;
  for (const auto& [doc, key] : preport.manifest) adapters.emplace(doc, store.get(key, model.config()));

  // Task adapter for the probe.
  std::optional<lora::DeltaSet> task_delta;
  std::string task_key;
  if (config.probe != Probe::Off) {
    std::vector<world::DatasetRecord> pool;
    for (const auto& r : records)
      if (r.split == "task_pool" && pool.size() < config.task_questions) pool.push_back(r);
    io::BinaryWriter w;
    w.str("task");
    for (const auto& r : pool) {
      w.str(r.id);
      for (const auto& g : r.gold) w.str(doc_by_id.at(g)->text);
    }
    w.str(config.hyper.describe());
    w.str(augmentor->provenance());
    w.str(model.weights_digest());
    task_key = io::sha256_hex(w.bytes());
    note("task_lora", 0, 1);
    lora::LoraAdapter task;
    if (store.valid(task_key)) {
      task = store.get(task_key, model.config());
    } else {
      task = train_task_lora(model, tok, pool, corpus, *augmentor, config.hyper, eval_records);
      store.put(task_key, task, model.config());
    }
    task_delta = lora::to_delta(task);
    note("task_lora", 1, 1);
  }

  // Answering.
  std::map<std::string, const world::DatasetRecord*> rec_by_id;
  for (const auto& r : eval_records) rec_by_id[r.id] = &r;
  for (const auto& r : cf_records) rec_by_id[r.id] = &r;
  std::map<std::string, const world::Document*> cf_by_id;
  for (const auto& d : cf_docs) cf_by_id[d.id] = &d;
  const auto judge = eval::make_judge(config.scorer);

  std::vector<ItemResult> results(items.size());
  std::atomic<std::size_t> next{0}, done{0};
  std::mutex note_mu;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < items.size();) {
      const Item& it = items[i];
      ItemResult& out = results[i];
      out.item = it;
      try {
        const auto& rec = *rec_by_id.at(it.question_id);
        std::vector<std::string> texts;
        std::vector<const lora::LoraAdapter*> used;
        for (const auto& id : it.passage_ids) {
          const world::Document* d = it.study == "faithfulness" ? cf_by_id.at(id) : doc_by_id.at(id);
          texts.push_back(d->text);
          auto a = adapters.find(id);
          if (a == adapters.end()) {
            auto f = preport.failures.find(id);
            throw Error("no adapter for " + id + (f == preport.failures.end() ? "" : ": " + f->second));
          }
          used.push_back(&a->second);
        }
        inference::AnswerOptions opts;
        opts.max_new = config.max_new;
        opts.want_taps = config.pks && it.study == "main" && it.noise == "top3" && it.probe == "off";
        if (it.probe == "on") opts.extra = &*task_delta;
        auto ans = inference::answer(model, tok, it.mode, it.question_id, rec.question, texts, used, opts);
        if (ans.taps) {
          out.pks = analysis::pks_profile(model, *ans.taps, it.question_id, inference::mode_name(it.mode));
          ans.taps.reset();
        }
        if (it.study == "faithfulness") {
          const auto& cf = *rec.counterfactual;
          out.answer_class = analysis::answer_class_name(
              analysis::classify_answer(ans.text, cf.counterfactual_answers, cf.original_answers));
          out.judgment = judge->judge(it.question_id, rec.question, cf.counterfactual_answers, ans.text);
        } else {
          out.judgment = judge->judge(it.question_id, rec.question, rec.answers, ans.text);
        }
        out.answer = std::move(ans);
      } catch (const std::exception& e) {
        out.error = e.what();
      }
      const std::size_t d = ++done;
      std::lock_guard lock(note_mu);
      note("answer", d, items.size());
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < config.threads; ++t) pool.emplace_back(work);
    work();
  }
  std::sort(results.begin(), results.end(), item_less);

  // Persistence.
  fs::create_directories(config.output);
  std::string answers, judgments, failures, pks;
  RunResult rr{config.output, results.size(), 0, false};
  for (const auto& r : results) {
    json keys{{"question_id", r.item.question_id}, {"study", r.item.study},  {"type", r.item.type},
              {"noise", r.item.noise},             {"probe", r.item.probe},  {"mode", inference::mode_name(r.item.mode)},
              {"passages", r.item.passage_ids}};
    if (!r.error.empty()) {
      ++rr.failures;
      json f = keys;
      f["error"] = r.error;
      failures += f.dump() + "\n";
      continue;
    }
    json a = json::parse(inference::to_json(*r.answer));
    for (auto& [k, v] : keys.items()) a[k] = v;
    a["task_adapter"] = r.item.probe == "on";
    answers += a.dump() + "\n";
    json j = keys;
    j.erase("passages");
    j["correct"] = r.judgment->correct;
    j["scorer"] = eval::scorer_name(r.judgment->scorer);
    j["payload"] = r.judgment->payload;
    if (r.judgment->f1) j["f1"] = *r.judgment->f1;
    if (!r.answer_class.empty()) j["class"] = r.answer_class;
    j["prompt_tokens"] = r.answer->prompt_tokens;
    j["adapters_merged"] = r.answer->adapters_merged;
    judgments += j.dump() + "\n";
    if (r.pks)
      pks += json{{"question_id", r.pks->question_id},
                  {"mode", r.pks->mode},
                  {"type", r.item.type},
                  {"tokens", r.pks->tokens},
                  {"scores", r.pks->scores}}
                 .dump() +
             "\n";
  }
  io::write_file_atomic(config.output / "answers.jsonl", answers);
  io::write_file_atomic(config.output / "judgments.jsonl", judgments);
  io::write_file_atomic(config.output / "failures.jsonl", failures);
  if (config.pks) io::write_file_atomic(config.output / "pks_profiles.jsonl", pks);
  else fs::remove(config.output / "pks_profiles.jsonl");

  if (config.similarity) {
    note("similarity", 0, 1);
    std::vector<analysis::SimilarityItem> sim;
    for (const auto& d : corpus)
      if (eval_articles.contains(d.article_id) && adapters.contains(d.id))
        sim.push_back({d.id, d.article_id, lora::flatten(adapters.at(d.id))});
    const auto study = analysis::similarity_study(std::move(sim), mix_seed(config.seed, "similarity"));
    io::write_file_atomic(config.output / "similarity_pairs.csv", analysis::similarity_pairs_csv(study));
    note("similarity", 1, 1);
  } else {
    fs::remove(config.output / "similarity_pairs.csv");
  }

  json inputs{{"model", io::file_sha256_hex(config.model)},
              {"tokenizer", io::file_sha256_hex(config.tokenizer)},
              {"corpus", io::file_sha256_hex(config.world / "corpus.jsonl")},
              {"dataset", io::file_sha256_hex(config.world / "dataset.jsonl")}};
  json manifest{{"config_hash", config.hash()},
                {"config", config.canonical()},
                {"seed", config.seed},
                {"lora_seed", config.hyper.seed},
                {"threads", config.threads},
                {"inputs", inputs},
                {"model_digest", model.weights_digest()},
                {"adapters", preport.manifest},
                {"task_adapter", task_key},
                {"parameterize", {{"trained", preport.trained}, {"reused", preport.reused},
                                  {"failures", preport.failures}}},
                {"items", rr.items},
                {"failures", rr.failures},
                {"pks_averaging", "per question over generated tokens, then across questions"},
                {"world", "synthetic analog"}};
  io::write_file_atomic(config.output / "manifest.json", manifest.dump(2) + "\n");
  rr.failure_threshold_exceeded =
      rr.items > 0 && static_cast<double>(rr.failures) / static_cast<double>(rr.items) > config.max_failure_fraction;
  return rr;
}

std::vector<fs::path> report(const fs::path& run_dir) {
  if (!fs::exists(run_dir / "judgments.jsonl")) throw ConfigError("report: " + run_dir.string() + " is not a run");
  const auto judgments = read_ndjson(run_dir / "judgments.jsonl");
  if (judgments.empty()) throw ConfigError("report: run " + run_dir.string() + " has no judgments");
  const fs::path out = run_dir / "report";
  fs::create_directories(out);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    io::write_file_atomic(out / name, text);
    written.push_back(out / name);
  };
  std::ostringstream summary;
  summary << "Experiment summary (synthetic world analog)\n\n";

  // Accuracy by (type, probe, noise, mode).
  std::vector<eval::ScoredItem> scored;
  for (const auto& j : judgments) {
    if (j.at("study") != "main") continue;
    eval::ScoredItem s{{j.at("type").get<std::string>(), j.at("probe").get<std::string>(),
                        j.at("noise").get<std::string>(), j.at("mode").get<std::string>()},
                       j.at("correct").get<bool>(),
                       {}};
    if (j.contains("f1")) s.f1 = j.at("f1").get<double>();
    scored.push_back(std::move(s));
  }
  std::map<std::vector<std::string>, double> acc;
  if (!scored.empty()) {
    auto rows = eval::aggregate(scored);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      return std::make_tuple(a.keys[0], a.keys[1], noise_rank(a.keys[2]), mode_rank(a.keys[3])) <
             std::make_tuple(b.keys[0], b.keys[1], noise_rank(b.keys[2]), mode_rank(b.keys[3]));
    });
    std::string csv = "type,probe,noise,mode,n,correct,accuracy,mean_f1\n";
    for (const auto& r : rows) {
      csv += r.keys[0] + "," + r.keys[1] + "," + r.keys[2] + "," + r.keys[3] + "," + std::to_string(r.n) + "," +
             std::to_string(r.correct) + "," + fixed(r.accuracy) + "," + (r.mean_f1 ? fixed(*r.mean_f1, 4) : "") +
             "\n";
      acc[r.keys] = r.accuracy;
    }
    emit("accuracy.csv", csv);

    std::set<std::tuple<std::string, std::string>> groups;
    std::set<std::string> noises, modes;
    for (const auto& r : rows) {
      groups.insert({r.keys[0], r.keys[1]});
      noises.insert(r.keys[2]);
      modes.insert(r.keys[3]);
    }
    std::vector<std::string> noise_list(noises.begin(), noises.end()), mode_list(modes.begin(), modes.end());
    std::sort(noise_list.begin(), noise_list.end(), [](auto& a, auto& b) { return noise_rank(a) < noise_rank(b); });
    std::sort(mode_list.begin(), mode_list.end(), [](auto& a, auto& b) { return mode_rank(a) < mode_rank(b); });
    for (const auto& [type, probe] : groups) {
      summary << "Accuracy (%), " << type << " questions, task adapter " << probe << "\n";
      char line[256];
      std::snprintf(line, sizeof line, "  %-14s", "mode");
      summary << line;
      for (const auto& n : noise_list) {
        std::snprintf(line, sizeof line, "%15s", n.c_str());
        summary << line;
      }
      summary << "\n";
      for (const auto& m : mode_list) {
        std::snprintf(line, sizeof line, "  %-14s", m.c_str());
        summary << line;
        for (const auto& n : noise_list) {
          auto it = acc.find({type, probe, n, m});
          std::snprintf(line, sizeof line, "%15s", it == acc.end() ? "-" : fixed(it->second).c_str());
          summary << line;
        }
        summary << "\n";
      }
      auto cell = [&](const std::string& n, const std::string& m) -> std::optional<double> {
        auto it = acc.find({type, probe, n, m});
        if (it == acc.end()) return std::nullopt;
        return it->second;
      };
      if (auto v = cell("top3", "vanilla"), r = cell("top3", "rag"), p = cell("top3", "prag"),
          c = cell("top3", "prag_combine");
          v && r && p && c) {
        summary << "  trend (top3): prag - vanilla = " << fixed(*p - *v) << ", rag - prag = " << fixed(*r - *p)
                << ", combine - rag = " << fixed(*c - *r) << "\n";
      }
      if (auto v = cell("replace_all", "vanilla"), p = cell("replace_all", "prag"); v && p)
        summary << "  replace_all: prag - vanilla = " << fixed(*p - *v) << "\n";
      for (const auto& n : noise_list)
        if (auto r = cell(n, "rag"), c = cell(n, "prag_combine"); r && c)
          summary << "  " << n << ": combine - rag = " << fixed(*c - *r) << "\n";
      summary << "\n";
    }
  }

  // PKS differences.
  if (fs::exists(run_dir / "pks_profiles.jsonl")) {
    std::map<std::string, std::vector<analysis::PksProfile>> by_mode;
    for (const auto& j : read_ndjson(run_dir / "pks_profiles.jsonl"))
      by_mode[j.at("mode").get<std::string>()].push_back({j.at("question_id").get<std::string>(),
                                                         j.at("mode").get<std::string>(),
                                                         j.at("scores").get<std::vector<double>>(),
                                                         j.at("tokens").get<std::size_t>()});
    std::string csv = "comparison,layer,n,injected,baseline,difference\n";
    bool any = false;
    for (const auto& [inj, base] : std::vector<std::pair<std::string, std::string>>{{"prag", "vanilla"},
                                                                                   {"prag_combine", "rag"}}) {
      auto a = by_mode[inj], b = by_mode[base];
      std::set<std::string> qa, qb;
      for (const auto& p : a) qa.insert(p.question_id);
      for (const auto& p : b) qb.insert(p.question_id);
      std::erase_if(a, [&](const auto& p) { return !qb.contains(p.question_id); });
      std::erase_if(b, [&](const auto& p) { return !qa.contains(p.question_id); });
      if (a.empty()) continue;
      any = true;
      const auto d = analysis::pks_difference(a, b);
      for (std::size_t l = 0; l < d.difference.size(); ++l)
        csv += inj + "_vs_" + base + "," + std::to_string(l + 1) + "," + std::to_string(d.counts[l]) + "," +
               fixed(d.mean_injected[l], 6) + "," + fixed(d.mean_baseline[l], 6) + "," + fixed(d.difference[l], 6) +
               "\n";
      summary << "PKS difference " << inj << " vs " << base << " (per layer, averaged per question then across "
              << d.counts.front() << " questions):";
      for (double x : d.difference) summary << " " << (x >= 0 ? "+" : "") << fixed(x, 6);
      summary << "\n  final layer: " << (d.difference.back() >= 0 ? "positive" : "negative") << "\n";
    }
    if (any) {
      emit("pks.csv", csv);
      summary << "\n";
    }
  }

  // Similarity histogram.
  if (fs::exists(run_dir / "similarity_pairs.csv")) {
    std::istringstream in(io::read_file(run_dir / "similarity_pairs.csv"));
    std::string line;
    std::getline(in, line);
    analysis::SimilarityStudy s;
    std::vector<double> rel, irr;
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ls(line);
      for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
      if (f.size() != 4) throw CorruptFileError("similarity_pairs.csv: malformed line '" + line + "'");
      (f[2] == "relevant" ? rel : irr).push_back(std::stod(f[3]));
    }
    constexpr std::size_t bins = 20;
    auto hist = [&](const std::vector<double>& xs) {
      std::vector<std::size_t> h(bins, 0);
      for (double x : xs) ++h[std::min(bins - 1, static_cast<std::size_t>((x + 1.0) / 2.0 * bins))];
      return h;
    };
    auto mean = [](const std::vector<double>& xs) {
      double m = 0;
      for (double x : xs) m += x;
      return xs.empty() ? 0.0 : m / static_cast<double>(xs.size());
    };
    const auto hr = hist(rel), hi = hist(irr);
    std::string csv = "bin_low,bin_high,relevant,irrelevant\n";
    for (std::size_t b = 0; b < bins; ++b)
      csv += fixed(-1.0 + 2.0 * static_cast<double>(b) / bins, 3) + "," +
             fixed(-1.0 + 2.0 * static_cast<double>(b + 1) / bins, 3) + "," + std::to_string(hr[b]) + "," +
             std::to_string(hi[b]) + "\n";
    emit("similarity_hist.csv", csv);
    summary << "Adapter similarity: relevant mean " << fixed(mean(rel), 4) << " (n=" << rel.size()
            << "), irrelevant mean " << fixed(mean(irr), 4) << " (n=" << irr.size() << "), gap "
            << fixed(mean(rel) - mean(irr), 4) << "\n\n";
  }

  // Faithfulness classes.
  std::map<std::string, std::map<std::string, std::size_t>> classes;
  for (const auto& j : judgments)
    if (j.at("study") == "faithfulness") ++classes[j.at("mode").get<std::string>()][j.at("class").get<std::string>()];
  if (!classes.empty()) {
    std::vector<std::string> ms;
    for (const auto& [m, c] : classes) ms.push_back(m);
    std::sort(ms.begin(), ms.end(), [](auto& a, auto& b) { return mode_rank(a) < mode_rank(b); });
    std::string csv = "mode,n,counterfactual,original,both,other\n";
    summary << "Counterfactual faithfulness (% of answers)\n";
    for (const auto& m : ms) {
      auto& c = classes[m];
      std::size_t n = 0;
      for (const auto& [k, v] : c) n += v;
      auto pct = [&](const std::string& k) { return fixed(100.0 * static_cast<double>(c[k]) / static_cast<double>(n)); };
      csv += m + "," + std::to_string(n) + "," + pct("counterfactual") + "," + pct("original") + "," + pct("both") +
             "," + pct("other") + "\n";
      summary << "  " << m << ": counterfactual " << pct("counterfactual") << ", original " << pct("original")
              << ", both " << pct("both") << ", other " << pct("other") << " (n=" << n << ")\n";
    }
    emit("faithfulness.csv", csv);
    summary << "\n";
  }

  std::size_t n_fail = 0;
  if (fs::exists(run_dir / "failures.jsonl")) n_fail = read_ndjson(run_dir / "failures.jsonl").size();
  summary << "Judged items: " << judgments.size() << ", failed items excluded: " << n_fail << "\n";
  emit("summary.txt", summary.str());
  return written;
}

}  // namespace prag::harness
