// Command-line front end: world generation, base training, document
// parameterization, experiment runs and reports.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "prag/analysis.hpp"
#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/harness.hpp"

namespace fs = std::filesystem;
using namespace prag;

namespace {

constexpr int kConfigError = 2;
constexpr int kPartialFailure = 3;

struct Globals {
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  fs::path out;
  bool quiet = false;
};

class Ticker {
 public:
  explicit Ticker(bool quiet) : quiet_(quiet) {}
  void operator()(const std::string& stage, std::size_t done, std::size_t total) {
    if (quiet_) return;
    const auto now = std::chrono::steady_clock::now();
    if (done != total && stage == last_ && now - at_ < std::chrono::seconds(2)) return;
    at_ = now;
    last_ = stage;
    std::fprintf(stderr, "[%s] %zu/%zu\n", stage.c_str(), done, total);
  }

 private:
  bool quiet_;
  std::string last_;
  std::chrono::steady_clock::time_point at_{};
};

fs::path require_out(const Globals& g, const char* cmd) {
  if (g.out.empty()) throw ConfigError(std::string(cmd) + ": --out is required");
  return g.out;
}

world::World load_world_dir(const fs::path& dir) {
  if (!fs::exists(dir / "corpus.jsonl")) throw ConfigError("no world at " + dir.string());
  return world::load_world(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parametric retrieval-augmented generation laboratory"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output location");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress output");

  // gen-world
  auto* gen = app.add_subcommand("gen-world", "Generate the synthetic world into --out");
  world::SyntheticWorldSpec spec;
  gen->add_option("--articles", spec.n_articles, "Evaluation articles")->capture_default_str();
  gen->add_option("--pool-articles", spec.n_pool_articles, "Task-pool articles")->capture_default_str();
  gen->add_option("--factual", spec.n_factual, "Factual questions")->capture_default_str();
  gen->add_option("--multihop", spec.n_multihop, "Multihop questions")->capture_default_str();
  gen->add_option("--task-pool", spec.task_pool, "Task-pool questions")->capture_default_str();
  gen->add_option("--faithfulness", spec.n_faithfulness, "Counterfactual questions")->capture_default_str();
  gen->add_option("--openbook", spec.n_openbook, "Open-book pretraining samples")->capture_default_str();

  // train-base
  auto* tb = app.add_subcommand("train-base", "Train the base model on a world's pretraining text");
  fs::path tb_world;
  lm::BaseTrainConfig btc;
  lm::ModelConfig mc;
  tb->add_option("--world", tb_world, "World directory")->required();
  tb->add_option("--steps", btc.steps, "Optimizer steps")->capture_default_str();
  tb->add_option("--batch", btc.batch_sequences, "Sequences per step")->capture_default_str();
  tb->add_option("--lr", btc.lr, "Peak learning rate")->capture_default_str();
  tb->add_option("--d-model", mc.d_model, "Hidden size")->capture_default_str();
  tb->add_option("--layers", mc.n_layers, "Layers")->capture_default_str();
  tb->add_option("--heads", mc.n_heads, "Attention heads")->capture_default_str();
  tb->add_option("--d-ff", mc.d_ff, "FFN width")->capture_default_str();
  tb->add_option("--context", mc.max_seq_len, "Context length")->capture_default_str();

  // parameterize
  auto* pz = app.add_subcommand("parameterize", "Train one adapter per corpus document");
  fs::path pz_world, pz_model, pz_store;
  std::string pz_preset = "desk", pz_aug = "synthetic";
  pz->add_option("--world", pz_world, "World directory")->required();
  pz->add_option("--model", pz_model, "Checkpoint (vocab.txt alongside)")->required();
  pz->add_option("--store", pz_store, "Adapter store directory")->required();
  pz->add_option("--preset", pz_preset, "Hyperparameter preset: desk or paper")->capture_default_str();
  pz->add_option("--augmentor", pz_aug, "synthetic or remote")->capture_default_str();

  // run
  auto* run = app.add_subcommand("run", "Run an experiment from a config file");
  fs::path run_cfg;
  bool run_report = true;
  run->add_option("config", run_cfg, "Experiment config (INI)")->required();
  run->add_flag("!--no-report", run_report, "Skip report generation");

  // report
  auto* rep = app.add_subcommand("report", "Write report tables for a run directory");
  fs::path rep_dir;
  rep->add_option("run", rep_dir, "Run directory")->required();

  // analyze-sim
  auto* sim = app.add_subcommand("analyze-sim", "Adapter similarity study over a store");
  fs::path sim_world, sim_model, sim_store;
  sim->add_option("--world", sim_world, "World directory")->required();
  sim->add_option("--model", sim_model, "Checkpoint (for dimensions)")->required();
  sim->add_option("--store", sim_store, "Adapter store directory")->required();

  // analyze-pks
  auto* pks = app.add_subcommand("analyze-pks", "Per-layer knowledge-score differences for a run");
  fs::path pks_dir;
  pks->add_option("run", pks_dir, "Run directory with pks_profiles.jsonl")->required();

  CLI11_PARSE(app, argc, argv);
  Ticker tick(g.quiet);

  try {
    if (*gen) {
      spec.seed = g.seed;
      const auto out = require_out(g, "gen-world");
      const auto w = world::gen_synthetic_world(spec);
      world::save_world(w, out);
      std::printf("world: %zu pretraining sequences, %zu documents, %zu records -> %s\n", w.pretraining.size(),
                  w.corpus.size(), w.records.size(), out.string().c_str());
    } else if (*tb) {
      const auto out = require_out(g, "train-base");
      const auto w = load_world_dir(tb_world);
      const auto tok = harness::world_tokenizer(w);
      mc.vocab_size = static_cast<std::int32_t>(tok.size());
      mc.validate();
      btc.seed = g.seed;
      std::vector<std::vector<std::int32_t>> seqs;
      for (const auto& s : w.pretraining) seqs.push_back(tok.encode(s));
      lm::BaseTrainReport rep;
      const auto start = std::chrono::steady_clock::now();
      double running = 0.0;
      const auto model = lm::train_base(mc, seqs, btc, &rep, [&](std::int64_t step, float loss) {
        running = step == 0 ? loss : 0.98 * running + 0.02 * loss;
        if (!g.quiet && (step + 1) % 100 == 0) {
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          std::fprintf(stderr, "[train-base] step %lld/%lld loss %.4f (%.0fs)\n", static_cast<long long>(step + 1),
                       static_cast<long long>(btc.steps), running, secs);
        }
      });
      fs::create_directories(out);
      tok.save(out / "vocab.txt");
      lm::save_checkpoint(model, out / "model.ckpt");
      std::printf("base model: vocab %zu, held-out nll %.4f (uniform %.4f) -> %s\n", tok.size(), rep.heldout_nll,
                  rep.uniform_nll, (out / "model.ckpt").string().c_str());
    } else if (*pz) {
      const auto w = load_world_dir(pz_world);
      const auto tok = lm::Tokenizer::load(pz_model.parent_path() / "vocab.txt");
      const auto model = lm::load_checkpoint(pz_model);
      auto hyper = param::lora_preset(pz_preset);
      auto aug = harness::make_augmentor(pz_aug, g.seed);
      const lora::AdapterStore store(pz_store);
      const auto rep = param::parameterize_corpus(model, tok, w.corpus, *aug, hyper, store, g.threads,
                                                  [&](std::size_t d, std::size_t t) { tick("parameterize", d, t); });
      std::printf("adapters: %zu trained, %zu reused, %zu failed -> %s\n", rep.trained, rep.reused,
                  rep.failures.size(), pz_store.string().c_str());
      for (const auto& [doc, msg] : rep.failures) std::fprintf(stderr, "  %s: %s\n", doc.c_str(), msg.c_str());
      if (!rep.failures.empty()) return kPartialFailure;
    } else if (*run) {
      auto cfg = harness::ExperimentConfig::load(run_cfg);
      if (app.get_option("--threads")->count() > 0) cfg.threads = g.threads;
      if (app.get_option("--seed")->count() > 0) cfg.seed = g.seed;
      if (!g.out.empty()) cfg.output = g.out;
      const auto rr = harness::run_experiment(cfg, std::ref(tick));
      std::printf("run: %zu items, %zu failed -> %s\n", rr.items, rr.failures, rr.dir.string().c_str());
      if (run_report)
        for (const auto& p : harness::report(rr.dir)) std::printf("  %s\n", p.string().c_str());
      if (rr.failure_threshold_exceeded) {
        std::fprintf(stderr, "failure fraction exceeds the configured threshold\n");
        return kPartialFailure;
      }
    } else if (*rep) {
      for (const auto& p : harness::report(rep_dir)) std::printf("%s\n", p.string().c_str());
    } else if (*sim) {
      const auto w = load_world_dir(sim_world);
      const auto model = lm::load_checkpoint(sim_model);
      const lora::AdapterStore store(sim_store);
      const auto study = analysis::similarity_study(store, w.corpus, model.config(), g.seed);
      if (!g.out.empty()) {
        fs::create_directories(g.out);
        io::write_file_atomic(g.out / "similarity_pairs.csv", analysis::similarity_pairs_csv(study));
        io::write_file_atomic(g.out / "similarity_hist.csv", analysis::similarity_histogram_csv(study));
      }
      std::printf("relevant mean %.4f (n=%zu), irrelevant mean %.4f (n=%zu), gap %.4f\n", study.relevant.mean,
                  study.relevant.n, study.irrelevant.mean, study.irrelevant.n, study.gap());
    } else if (*pks) {
      if (!fs::exists(pks_dir / "pks_profiles.jsonl"))
        throw ConfigError("analyze-pks: " + pks_dir.string() + " has no pks_profiles.jsonl (run with pks = true)");
      harness::report(pks_dir);
      std::cout << io::read_file(pks_dir / "report" / "pks.csv");
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
