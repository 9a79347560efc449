#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "nlohmann/json.hpp"
#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/harness.hpp"
#include "unit/support.hpp"

using namespace prag;
using harness::ExperimentConfig;
namespace fs = std::filesystem;

namespace {

world::SyntheticWorldSpec small_spec() {
  world::SyntheticWorldSpec s;
  s.n_articles = 10;
  s.n_pool_articles = 4;
  s.n_known_persons = 12;
  s.n_known_companies = 4;
  s.n_factual = 8;
  s.n_multihop = 4;
  s.task_pool = 6;
  s.n_faithfulness = 3;
  s.bio_variants = 1;
  s.n_openbook = 40;
  s.roster_passes = 1;
  return s;
}

// World, vocabulary and a small untrained model on disk, shared by the cases below.
struct Fixture {
  testing::TempDir dir{"harness"};
  world::World w;
  fs::path world_dir, model_path;

  Fixture() {
    w = world::gen_synthetic_world(small_spec());
    world_dir = dir.path / "world";
    world::save_world(w, world_dir);
    const auto tok = harness::world_tokenizer(w);
    lm::ModelConfig c;
    c.vocab_size = static_cast<std::int32_t>(tok.size());
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 160;
    fs::create_directories(dir.path / "base");
    tok.save(dir.path / "base" / "vocab.txt");
    model_path = dir.path / "base" / "model.ckpt";
    lm::save_checkpoint(lm::TransformerLM::init(c, 3), model_path);
  }

  std::string ini(const std::string& run, const std::string& extra = "") const {
    return "[paths]\nworld = world\nmodel = base/model.ckpt\nadapters = adapters\noutput = " + run +
           "\n\n[run]\nnoise = top3, replace_first, replace_last, replace_all\nmax_new = 6\n" + extra +
           "\n[lora]\nepochs = 2\n";
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

std::vector<nlohmann::json> read_lines(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = ExperimentConfig::parse(
      "[paths]\nworld = w\nmodel = m/model.ckpt\nadapters = /abs/store\noutput = out\n"
      "[run]\nmodes = prag, rag\nnoise = replace_all\ntypes = multihop\nk = 2\npassage_source = gold\n"
      "probe = both\nmax_questions = 5\npks = true\nseed = 11\n"
      "[lora]\npreset = paper\nepochs = 3\n[task_lora]\nquestions = 9\n",
      "/base");
  CHECK(c.world == fs::path("/base/w"));
  CHECK(c.tokenizer == fs::path("/base/m/vocab.txt"));
  CHECK(c.adapters == fs::path("/abs/store"));
  CHECK(c.modes == std::vector<inference::Mode>{inference::Mode::Prag, inference::Mode::Rag});
  CHECK(c.noise == std::vector<retrieval::NoiseCondition>{retrieval::NoiseCondition::ReplaceAll});
  CHECK(c.types == std::vector<world::QuestionType>{world::QuestionType::Multihop});
  CHECK(c.k == 2);
  CHECK(c.source == harness::PassageSource::Gold);
  CHECK(c.probe == harness::Probe::Both);
  CHECK(c.max_questions == 5);
  CHECK(c.pks);
  CHECK(c.seed == 11);
  CHECK(c.hyper.lr == 3e-4f);
  CHECK(c.hyper.epochs == 3);
  CHECK(c.task_questions == 9);

  const auto d = ExperimentConfig::parse("[paths]\nworld = w\n", "/base");
  CHECK(d.modes.size() == 4);
  CHECK(d.k == 3);
  CHECK(d.probe == harness::Probe::Off);
  CHECK(d.preset == "desk");

  CHECK(c.hash() == ExperimentConfig::parse(
                        "[paths]\nworld = w\nmodel = m/model.ckpt\nadapters = /abs/store\noutput = out\n"
                        "[run]\nmodes = prag, rag\nnoise = replace_all\ntypes = multihop\nk = 2\n"
                        "passage_source = gold\nprobe = both\nmax_questions = 5\npks = true\nseed = 11\n"
                        "[lora]\npreset = paper\nepochs = 3\n[task_lora]\nquestions = 9\n",
                        "/base")
                        .hash());
  auto e = c;
  e.seed = 12;
  CHECK(e.hash() != c.hash());

  CHECK_THROWS_AS(ExperimentConfig::parse("[run]\nbogus = 1\n", "/"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[extra]\nk = 1\n", "/"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[run]\nk = three\n", "/"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[run]\npks = maybe\n", "/"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[run]\nmodes = vanilla, oracle\n", "/"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[lora]\npreset = giant\n", "/"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.ini"), ConfigError);
}

TEST_CASE("config validation") {
  auto& f = fixture();
  auto c = ExperimentConfig::parse(f.ini("run_v"), f.dir.path);
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.k = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.model = f.dir.path / "missing.ckpt";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.max_failure_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.augmentor = "magic";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.output.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("world tokenizer covers every text the model will see") {
  const auto& w = fixture().w;
  const auto tok = harness::world_tokenizer(w);
  auto covered = [&](const std::string& s) {
    for (auto id : tok.encode(s))
      if (id == lm::Tokenizer::kUnk) return false;
    return true;
  };
  for (const auto& d : w.corpus) CHECK(covered(d.text));
  for (const auto& r : w.records) {
    CHECK(covered(r.question));
    for (const auto& a : r.answers) CHECK(covered(a));
    if (r.counterfactual)
      for (const auto& p : r.counterfactual->passages) CHECK(covered(p.text));
  }
  CHECK(covered(inference::render_prompt({}, std::vector<std::string>{w.corpus.front().text}, w.records.front().question)));
}

TEST_CASE("train_task_lora") {
  auto& f = fixture();
  const auto tok = lm::Tokenizer::load(f.dir.path / "base" / "vocab.txt");
  const auto model = lm::load_checkpoint(f.model_path);
  std::vector<world::DatasetRecord> pool, eval_set;
  for (const auto& r : f.w.records) (r.split == "task_pool" ? pool : eval_set).push_back(r);
  std::erase_if(eval_set, [](const auto& r) { return r.split != "eval"; });
  param::SyntheticAugmentor aug;
  auto hyper = param::lora_preset("desk");
  hyper.epochs = 0;
  const auto z = harness::train_task_lora(model, tok, pool, f.w.corpus, aug, hyper, eval_set);
  for (const auto& t : z.targets)
    for (float x : t.b.values()) CHECK(x == 0.0f);

  hyper.epochs = 1;
  param::LoraTrainReport rep;
  harness::train_task_lora(model, tok, pool, f.w.corpus, aug, hyper, eval_set, &rep);
  std::set<std::string> docs;
  for (const auto& r : pool) docs.insert(r.gold.begin(), r.gold.end());
  CHECK(rep.steps == docs.size() * hyper.n_rewrites * hyper.n_qa);

  std::set<std::string> pool_ids, eval_ids;
  for (const auto& r : pool) pool_ids.insert(r.id);
  for (const auto& r : eval_set) eval_ids.insert(r.id);
  for (const auto& id : pool_ids) CHECK_FALSE(eval_ids.contains(id));

  auto overlapping = pool;
  overlapping.push_back(eval_set.front());
  CHECK_THROWS_AS(harness::train_task_lora(model, tok, overlapping, f.w.corpus, aug, hyper, eval_set), ConfigError);
  CHECK_THROWS_AS(harness::train_task_lora(model, tok, {}, f.w.corpus, aug, hyper, eval_set), ConfigError);
}

TEST_CASE("run_experiment and report end to end") {
  auto& f = fixture();
  const auto cfg = ExperimentConfig::parse(f.ini("run_a", "pks = true\nfaithfulness = true\nsimilarity = true\n"),
                                           f.dir.path);
  const auto rr = harness::run_experiment(cfg);
  const std::size_t questions = 12, conditions = 4, modes = 4, cf = 3;
  CHECK(rr.items == questions * conditions * modes + cf * modes);
  CHECK(rr.failures == 0);
  CHECK_FALSE(rr.failure_threshold_exceeded);

  const auto judgments = read_lines(rr.dir / "judgments.jsonl");
  CHECK(judgments.size() == rr.items);
  std::map<std::tuple<std::string, std::string>, std::map<std::string, nlohmann::json>> cells;
  for (const auto& j : judgments) cells[{j["question_id"], j["noise"]}][j["mode"]] = j;
  for (const auto& [key, by_mode] : cells) {
    REQUIRE(by_mode.size() == 4);
    CHECK(by_mode.at("prag")["prompt_tokens"] == by_mode.at("vanilla")["prompt_tokens"]);
    CHECK(by_mode.at("prag_combine")["prompt_tokens"] == by_mode.at("rag")["prompt_tokens"]);
    CHECK(by_mode.at("vanilla")["adapters_merged"] == 0);
  }
  for (const auto& a : read_lines(rr.dir / "answers.jsonl"))
    if (a["mode"] == "prag" || a["mode"] == "prag_combine") CHECK(a["adapters_merged"] == a["passages"].size());

  const auto manifest = nlohmann::json::parse(io::read_file(rr.dir / "manifest.json"));
  CHECK(manifest["config_hash"] == cfg.hash());
  CHECK(manifest["inputs"]["model"] == io::file_sha256_hex(f.model_path));

  const auto files = harness::report(rr.dir);
  CHECK(files.size() == 5);
  const auto accuracy = io::read_file(rr.dir / "report" / "accuracy.csv");
  // Header plus 2 types x 4 noise conditions x 4 modes.
  CHECK(std::count(accuracy.begin(), accuracy.end(), '\n') == 1 + 2 * 16);
  const auto faith = io::read_file(rr.dir / "report" / "faithfulness.csv");
  std::istringstream in(faith);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) cols.push_back(x);
    REQUIRE(cols.size() == 6);
    const double total = std::stod(cols[2]) + std::stod(cols[3]) + std::stod(cols[4]) + std::stod(cols[5]);
    CHECK(total == doctest::Approx(100.0).epsilon(0.001));
  }

  // Rerun from scratch into another directory: identical report bytes.
  fs::remove_all(cfg.adapters);
  auto again = ExperimentConfig::parse(f.ini("run_b", "pks = true\nfaithfulness = true\nsimilarity = true\n"),
                                       f.dir.path);
  again.threads = 2;
  const auto rb = harness::run_experiment(again);
  harness::report(rb.dir);
  for (const char* name : {"accuracy.csv", "pks.csv", "similarity_hist.csv", "faithfulness.csv", "summary.txt"})
    CHECK(io::read_file(rr.dir / "report" / name) == io::read_file(rb.dir / "report" / name));
  CHECK(io::read_file(rr.dir / "judgments.jsonl") == io::read_file(rb.dir / "judgments.jsonl"));

  CHECK_THROWS_AS(harness::report(f.dir.path / "nowhere"), ConfigError);
}

TEST_CASE("gold passages and the task adapter probe") {
  auto& f = fixture();
  const auto cfg = ExperimentConfig::parse(
      "[paths]\nworld = world\nmodel = base/model.ckpt\nadapters = adapters\noutput = run_probe\n"
      "[run]\npassage_source = gold\nprobe = both\ntypes = multihop\nmax_new = 4\n"
      "[lora]\nepochs = 1\n[task_lora]\nquestions = 4\n",
      f.dir.path);
  const auto rr = harness::run_experiment(cfg);
  CHECK(rr.items == 4 * 2 * 4);
  std::map<std::string, std::size_t> gold;
  for (const auto& r : f.w.records) gold[r.id] = r.gold.size();
  const auto answers = read_lines(rr.dir / "answers.jsonl");
  for (const auto& a : answers) {
    CHECK(a["passages"].size() == gold.at(a["question_id"]));
    CHECK(a["task_adapter"] == (a["probe"] == "on"));
  }
  const auto manifest = nlohmann::json::parse(io::read_file(rr.dir / "manifest.json"));
  CHECK(manifest["task_adapter"].get<std::string>().size() == 64);
}

TEST_CASE("bundled configs parse") {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(fs::path(PRAG_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".ini") continue;
    INFO(e.path());
    const auto c = ExperimentConfig::load(e.path());
    CHECK(c.world.filename() == "world");
    CHECK_FALSE(c.output.empty());
    ++n;
  }
  CHECK(n >= 3);
}
