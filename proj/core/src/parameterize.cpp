#include "prag/parameterize.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/optim.hpp"
#include "prag/rng.hpp"

namespace prag::param {

Augmentation SyntheticAugmentor::generate(const Document& doc, std::size_t n, std::size_t m) {
  const auto facts = world::parse_facts(doc.text);
  if (facts.empty()) throw ConfigError("synthetic augmentor: no facts found in document " + doc.id);
  Rng rng(mix_seed(seed_, doc.id));
  Augmentation out;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<std::size_t> order(facts.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::string text;
    for (auto i : order) text += (text.empty() ? "" : " ") + world::render_sentence(facts[i], rng.below(2));
    out.rewrites.push_back(std::move(text));
  }
  const std::size_t offset = rng.below(2);
  for (std::size_t l = 0; l < m; ++l) {
    const auto& f = facts[l % facts.size()];
    out.qa_pairs.push_back({world::render_question(f, offset + l / facts.size()), f.object});
  }
  return out;
}

RemoteAugmentor::RemoteAugmentor(remote::Endpoint endpoint)
    : endpoint_(std::move(endpoint)), limiter_(endpoint_.max_in_flight) {}

std::unique_ptr<RemoteAugmentor> RemoteAugmentor::from_env() {
  auto e = remote::endpoint_from_env("PRAG_AUGMENTOR_URL");
  if (!e) throw ConfigError("PRAG_AUGMENTOR_URL is not set");
  return std::make_unique<RemoteAugmentor>(*e);
}

Augmentation RemoteAugmentor::generate(const Document& doc, std::size_t n, std::size_t m) {
  const nlohmann::json req{{"text", doc.text}, {"n", n}, {"m", m}};
  const std::string line = remote::post_line(endpoint_, req.dump(), &limiter_);
  Augmentation out;
  try {
    const auto j = nlohmann::json::parse(line);
    out.rewrites = j.at("rewrites").get<std::vector<std::string>>();
    for (const auto& p : j.at("qa")) out.qa_pairs.push_back({p.at("q").get<std::string>(), p.at("a").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw RemoteError("augmentor response for " + doc.id + " is malformed: " + e.what());
  }
  if (out.rewrites.size() != n || out.qa_pairs.size() != m)
    throw RemoteError("augmentor returned " + std::to_string(out.rewrites.size()) + " rewrites and " +
                      std::to_string(out.qa_pairs.size()) + " QA pairs for " + doc.id + ", expected " +
                      std::to_string(n) + " and " + std::to_string(m));
  for (const auto& r : out.rewrites)
    if (r.empty()) throw RemoteError("augmentor returned an empty rewrite for " + doc.id);
  for (const auto& p : out.qa_pairs)
    if (p.question.empty() || p.answer.empty()) throw RemoteError("augmentor returned an empty QA field for " + doc.id);
  return out;
}

AugmentedDataset build_dataset(const Document& doc, Augmentor& augmentor, std::size_t n, std::size_t m) {
  if (n < 1 || m < 1) throw ConfigError("build_dataset: n and m must be >= 1");
  if (doc.text.find_first_not_of(" \t\r\n") == std::string::npos)
    throw ConfigError("build_dataset: document " + doc.id + " is empty");
  Augmentation a = augmentor.generate(doc, n, m);
  if (a.rewrites.size() != n || a.qa_pairs.size() != m)
    throw ConfigError("build_dataset: augmentor returned the wrong number of items for " + doc.id);
  AugmentedDataset d{doc.id, std::move(a.rewrites), std::move(a.qa_pairs), {}};
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t l = 0; l < m; ++l) d.samples.push_back({j, l});
  return d;
}

TrainingSequence make_training_sequence(const lm::Tokenizer& tok, const inference::PromptTemplate& tmpl,
                                        const std::string& document, const QaPair& qa, std::size_t max_tokens) {
  std::vector<std::int32_t> head = tok.encode(tmpl.instruction + " " + tmpl.passage_marker);
  std::vector<std::int32_t> doc = tok.encode(document);
  std::vector<std::int32_t> tail = tok.encode(tmpl.question_marker + " " + qa.question + " " + tmpl.answer_marker);
  std::vector<std::int32_t> answer = tok.encode(qa.answer);
  TrainingSequence s;
  const std::size_t fixed = head.size() + tail.size() + answer.size() + 1;
  if (fixed >= max_tokens) throw ConfigError("training sequence: question and answer alone exceed the context");
  if (fixed + doc.size() > max_tokens) {
    doc.erase(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(fixed + doc.size() - max_tokens));
    s.truncated = true;
  }
  s.tokens = std::move(head);
  s.tokens.insert(s.tokens.end(), doc.begin(), doc.end());
  s.tokens.insert(s.tokens.end(), tail.begin(), tail.end());
  s.answer_begin = s.tokens.size();
  s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
  s.tokens.push_back(lm::Tokenizer::kEos);
  return s;
}

std::string LoraHyper::describe() const {
  std::ostringstream o;
  o.precision(9);
  o << "rank=" << rank << ";alpha=" << alpha << ";lr=" << lr << ";epochs=" << epochs << ";n=" << n_rewrites
    << ";m=" << n_qa << ";answer_only=" << answer_only << ";clip=" << clip_norm << ";seed=" << seed;
  return o.str();
}

LoraHyper lora_preset(const std::string& name) {
  LoraHyper h;
  if (name == "paper") return h;
  if (name == "desk") {
    h.lr = 1e-3f;
    h.epochs = 8;
    h.n_rewrites = 2;
    h.n_qa = 6;
    return h;
  }
  throw ConfigError("unknown adapter preset '" + name + "' (expected paper or desk)");
}

lora::LoraAdapter train_lora(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                             std::span<const AugmentedDataset* const> datasets, const LoraHyper& hyper,
                             const std::string& adapter_id, LoraTrainReport* report,
                             const inference::PromptTemplate& tmpl) {
  const std::size_t ctx = static_cast<std::size_t>(model.config().max_seq_len);
  std::vector<TrainingSequence> seqs;
  for (const auto* d : datasets)
    for (const auto& s : d->samples) seqs.push_back(make_training_sequence(tok, tmpl, d->rewrites[s.rewrite], d->qa_pairs[s.qa], ctx));
  if (seqs.empty() && hyper.epochs > 0) throw ConfigError("train_lora: empty dataset for " + adapter_id);

  lora::LoraAdapter adapter =
      lora::init_adapter(model.config(), adapter_id, hyper.rank, hyper.alpha, mix_seed(hyper.seed, adapter_id));
  std::vector<num::Tensor*> params;
  for (auto& t : adapter.targets) params.push_back(&t.a), params.push_back(&t.b);
  num::AdamState state;
  num::AdamConfig adam;
  adam.lr = hyper.lr;
  Rng rng(mix_seed(hyper.seed ^ 0x5eedULL, adapter_id));

  if (report) *report = {};
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::int32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (auto i : order) {
      const auto& z = seqs[i].tokens;
      std::vector<std::int32_t> inputs{lm::Tokenizer::kEos};
      inputs.insert(inputs.end(), z.begin(), z.end() - 1);
      std::vector<std::uint8_t> mask(z.size(), 1);
      if (hyper.answer_only)
        for (std::size_t t = 0; t < seqs[i].answer_begin; ++t) mask[t] = 0;
      epoch_tokens += static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));

      num::Tape tape;
      const auto mb = lm::bind_model(tape, model, false);
      lm::LoraBinding lb{adapter.scaling(), {}, {}};
      for (auto& t : adapter.targets) {
        lb.a.push_back(tape.parameter(t.a));
        lb.b.push_back(tape.parameter(t.b));
      }
      const std::size_t start = 0;
      num::Var logits = lm::forward_graph(tape, model, mb, inputs, std::span(&start, 1), &lb);
      num::Var loss = num::ag::cross_entropy(tape, logits, z, mask);
      tape.backward(loss);
      epoch_loss += tape.value(loss)[0];

      std::vector<num::Tensor> grads;
      for (std::size_t k = 0; k < lb.a.size(); ++k) {
        grads.push_back(tape.grad(lb.a[k]));
        grads.push_back(tape.grad(lb.b[k]));
      }
      std::vector<num::Tensor*> gp;
      std::vector<const num::Tensor*> cgp;
      for (auto& g : grads) gp.push_back(&g), cgp.push_back(&g);
      if (hyper.clip_norm > 0.0f) num::clip_grad_norm(gp, hyper.clip_norm);
      num::adam_step(params, cgp, state, adam);
      if (report) ++report->steps;
    }
    if (report) {
      report->epoch_nll.push_back(static_cast<float>(epoch_loss / static_cast<double>(order.size())));
      report->contributing_tokens = epoch_tokens;
    }
  }
  for (const auto& t : adapter.targets)
    if (!t.a.all_finite() || !t.b.all_finite()) throw Error("train_lora: non-finite adapter weights for " + adapter_id);
  return adapter;
}

lora::LoraAdapter train_document_lora(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                                      const AugmentedDataset& dataset, const LoraHyper& hyper,
                                      LoraTrainReport* report, const inference::PromptTemplate& tmpl) {
  if (dataset.samples.empty()) throw ConfigError("train_document_lora: empty dataset for " + dataset.doc_id);
  const AugmentedDataset* one[] = {&dataset};
  return train_lora(model, tok, one, hyper, dataset.doc_id, report, tmpl);
}

std::string adapter_key(const Document& doc, const LoraHyper& hyper, const std::string& augmentor,
                        const std::string& model_digest) {
  io::BinaryWriter w;
  w.str(doc.id);
  w.str(doc.text);
  w.str(hyper.describe());
  w.str(augmentor);
  w.str(model_digest);
  return io::sha256_hex(w.bytes());
}

ParameterizeReport parameterize_corpus(const lm::TransformerLM& model, const lm::Tokenizer& tok,
                                       std::span<const Document> corpus, Augmentor& augmentor,
                                       const LoraHyper& hyper, const lora::AdapterStore& store, std::size_t threads,
                                       const std::function<void(std::size_t, std::size_t)>& progress) {
  const std::string digest = model.weights_digest();
  ParameterizeReport report;
  std::vector<std::string> keys(corpus.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    keys[i] = adapter_key(corpus[i], hyper, augmentor.provenance(), digest);
    if (store.valid(keys[i]))
      ++report.reused;
    else
      todo.push_back(i);
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0}, done{0};
  std::vector<std::string> errors(corpus.size());
  auto worker = [&] {
    for (std::size_t t; (t = next.fetch_add(1)) < todo.size();) {
      const std::size_t i = todo[t];
      try {
        const auto ds = build_dataset(corpus[i], augmentor, hyper.n_rewrites, hyper.n_qa);
        const auto adapter = train_document_lora(model, tok, ds, hyper);
        store.put(keys[i], adapter, model.config());
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
      const std::size_t d = ++done;
      if (progress) {
        std::lock_guard lock(mu);
        progress(d, todo.size());
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, todo.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
  }

  auto manifest = store.read_manifest();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (!errors[i].empty()) {
      report.failures[corpus[i].id] = errors[i];
      continue;
    }
    manifest[corpus[i].id] = keys[i];
    report.manifest[corpus[i].id] = keys[i];
  }
  report.trained = todo.size() - report.failures.size();
  store.write_manifest(manifest);
  return report;
}

}  // namespace prag::param
