#include <benchmark/benchmark.h>

#include "prag/analysis.hpp"
#include "prag/harness.hpp"
#include "prag/lora.hpp"
#include "prag/model.hpp"
#include "prag/ops.hpp"
#include "prag/parameterize.hpp"
#include "prag/retrieval.hpp"
#include "prag/rng.hpp"
#include "prag/world.hpp"

using namespace prag;

namespace {

num::Tensor random(num::Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  num::Tensor t(std::move(shape));
  for (auto& x : t.values()) x = static_cast<float>(rng.normal());
  return t;
}

lm::ModelConfig default_config(std::int32_t vocab) {
  lm::ModelConfig c;
  c.vocab_size = vocab;
  return c;
}

const world::World& small_world() {
  static const world::World w = world::gen_synthetic_world({});
  return w;
}

const lm::Tokenizer& world_tok() {
  static const lm::Tokenizer tok = harness::world_tokenizer(small_world());
  return tok;
}

const lm::TransformerLM& default_model() {
  static const lm::TransformerLM m =
      lm::TransformerLM::init(default_config(static_cast<std::int32_t>(world_tok().size())), 1);
  return m;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(num::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_Forward(benchmark::State& state) {
  const auto& m = default_model();
  std::vector<std::int32_t> toks(static_cast<std::size_t>(state.range(0)), 5);
  for (auto _ : state) benchmark::DoNotOptimize(lm::forward(m, toks));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

static void BM_GreedyDecode(benchmark::State& state) {
  const auto& m = default_model();
  std::vector<std::int32_t> prompt(120, 7);
  for (auto _ : state) benchmark::DoNotOptimize(lm::greedy_decode(m, prompt, nullptr, 8, -1));
}
BENCHMARK(BM_GreedyDecode)->Unit(benchmark::kMillisecond);

static void BM_TrainDocumentLora(benchmark::State& state) {
  const auto& m = default_model();
  param::SyntheticAugmentor aug;
  const auto ds = param::build_dataset(small_world().corpus.front(), aug, 1, 3);
  auto hyper = param::lora_preset("paper");
  for (auto _ : state) benchmark::DoNotOptimize(param::train_document_lora(m, world_tok(), ds, hyper));
}
BENCHMARK(BM_TrainDocumentLora)->Unit(benchmark::kMillisecond);

static void BM_Merge(benchmark::State& state) {
  const auto& c = default_model().config();
  std::vector<lora::LoraAdapter> adapters;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    auto a = lora::init_adapter(c, "d" + std::to_string(i), 2, 32.0f, static_cast<std::uint64_t>(i));
    for (auto& t : a.targets) t.b = random(t.b.shape(), static_cast<std::uint64_t>(100 + i));
    adapters.push_back(std::move(a));
  }
  for (auto _ : state) benchmark::DoNotOptimize(lora::merge(adapters));
}
BENCHMARK(BM_Merge)->Arg(1)->Arg(3)->Arg(8);

static void BM_Retrieve(benchmark::State& state) {
  const auto& w = small_world();
  const auto index = retrieval::build_index(w.corpus);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(retrieval::retrieve(index, w.records[i++ % w.records.size()].question));
}
BENCHMARK(BM_Retrieve);

static void BM_Jsd(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto p = random({n}, 3), q = random({n}, 4);
  num::softmax_inplace(p.values());
  num::softmax_inplace(q.values());
  for (auto _ : state) benchmark::DoNotOptimize(analysis::jsd(p.values(), q.values()));
}
BENCHMARK(BM_Jsd)->Arg(1024)->Arg(4096);

BENCHMARK_MAIN();
