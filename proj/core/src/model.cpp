#include "prag/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/ops.hpp"
#include "prag/optim.hpp"
#include "prag/rng.hpp"
#include "prag/tokenizer.hpp"

namespace prag::lora {

std::string role_name(FfnRole role) { return role == FfnRole::In ? "ffn_in" : "ffn_out"; }

bool DeltaSet::all_finite() const {
  return std::all_of(deltas.begin(), deltas.end(), [](const num::Tensor& t) { return t.all_finite(); });
}

}  // namespace prag::lora

namespace prag::lm {

namespace {

constexpr float kNormEps = 1e-5f;

Tensor gaussian(num::Shape shape, float stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

std::size_t sz(std::int32_t v) { return static_cast<std::size_t>(v); }

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0)
    throw ConfigError("model config: all sizes must be positive");
  if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
}

TransformerLM TransformerLM::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  TransformerLM m(config);
  Rng rng(seed);
  const std::size_t V = sz(config.vocab_size), d = sz(config.d_model), ff = sz(config.d_ff);
  const float std_w = 0.02f;
  const float std_resid = std_w / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  m.tok_emb = gaussian({V, d}, std_w, rng);
  m.pos_emb = gaussian({sz(config.max_seq_len), d}, 0.01f, rng);
  for (std::int32_t l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm_gain = Tensor::filled({d}, 1.0f);
    w.attn_norm_bias = Tensor({d});
    w.wq = gaussian({d, d}, std_w, rng);
    w.wk = gaussian({d, d}, std_w, rng);
    w.wv = gaussian({d, d}, std_w, rng);
    w.wo = gaussian({d, d}, std_resid, rng);
    w.ffn_norm_gain = Tensor::filled({d}, 1.0f);
    w.ffn_norm_bias = Tensor({d});
    w.w_in = gaussian({d, ff}, std_w, rng);
    w.b_in = Tensor({ff});
    w.w_out = gaussian({ff, d}, std_resid, rng);
    w.b_out = Tensor({d});
    m.layers.push_back(std::move(w));
  }
  m.final_norm_gain = Tensor::filled({d}, 1.0f);
  m.final_norm_bias = Tensor({d});
  if (!config.tie_embeddings) m.unembed = gaussian({d, V}, std_w, rng);
  return m;
}

std::vector<TransformerLM::Named> TransformerLM::named_parameters() {
  std::vector<Named> out;
  out.push_back({"tok_emb", &tok_emb});
  out.push_back({"pos_emb", &pos_emb});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& w = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm.gain", &w.attn_norm_gain});
    out.push_back({p + "attn_norm.bias", &w.attn_norm_bias});
    out.push_back({p + "attn.wq", &w.wq});
    out.push_back({p + "attn.wk", &w.wk});
    out.push_back({p + "attn.wv", &w.wv});
    out.push_back({p + "attn.wo", &w.wo});
    out.push_back({p + "ffn_norm.gain", &w.ffn_norm_gain});
    out.push_back({p + "ffn_norm.bias", &w.ffn_norm_bias});
    out.push_back({p + "ffn.w_in", &w.w_in});
    out.push_back({p + "ffn.b_in", &w.b_in});
    out.push_back({p + "ffn.w_out", &w.w_out});
    out.push_back({p + "ffn.b_out", &w.b_out});
  }
  out.push_back({"final_norm.gain", &final_norm_gain});
  out.push_back({"final_norm.bias", &final_norm_bias});
  if (!config_.tie_embeddings) out.push_back({"unembed", &unembed});
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> TransformerLM::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& n : const_cast<TransformerLM*>(this)->named_parameters()) out.emplace_back(n.name, n.tensor);
  return out;
}

const Tensor& TransformerLM::ffn_weight(std::size_t layer, lora::FfnRole role) const {
  const auto& w = layers.at(layer);
  return role == lora::FfnRole::In ? w.w_in : w.w_out;
}

void TransformerLM::check_delta(const lora::DeltaSet& delta) const {
  if (delta.deltas.size() != layers.size() * 2)
    throw ShapeError("delta covers " + std::to_string(delta.deltas.size()) + " matrices, model has " +
                     std::to_string(layers.size() * 2) + " FFN matrices");
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (auto role : {lora::FfnRole::In, lora::FfnRole::Out})
      if (delta.at(l, role).shape() != ffn_weight(l, role).shape())
        throw ShapeError("delta shape mismatch at layer " + std::to_string(l) + " " + lora::role_name(role));
}

TransformerLM TransformerLM::with_delta(const lora::DeltaSet& delta) const {
  check_delta(delta);
  TransformerLM out = *this;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    num::add_inplace(out.layers[l].w_in, delta.at(l, lora::FfnRole::In));
    num::add_inplace(out.layers[l].w_out, delta.at(l, lora::FfnRole::Out));
  }
  return out;
}

std::string TransformerLM::weights_digest() const {
  std::string bytes;
  for (const auto& [name, t] : named_parameters()) {
    bytes += name;
    bytes.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(float));
  }
  return io::sha256_hex(bytes);
}

ModelBinding bind_model(num::Tape& tape, const TransformerLM& model, bool trainable) {
  ModelBinding b;
  for (const auto& [name, t] : model.named_parameters())
    b.vars.push_back(trainable ? tape.parameter(*t) : tape.constant_ref(*t));
  return b;
}

namespace {

// Offsets into ModelBinding::vars, mirroring named_parameters().
constexpr std::size_t kPerLayer = 12;
struct LayerVars {
  Var attn_g, attn_b, wq, wk, wv, wo, ffn_g, ffn_b, w_in, b_in, w_out, b_out;
};

LayerVars layer_vars(const ModelBinding& b, std::size_t l) {
  const std::size_t o = 2 + l * kPerLayer;
  const auto& v = b.vars;
  return {v[o], v[o + 1], v[o + 2], v[o + 3], v[o + 4], v[o + 5], v[o + 6], v[o + 7], v[o + 8], v[o + 9], v[o + 10],
          v[o + 11]};
}

Var linear(num::Tape& t, Var x, Var w, const LoraBinding* lora, std::size_t slot) {
  Var y = num::ag::matmul(t, x, w);
  if (lora) {
    Var h = num::ag::matmul_nt(t, x, lora->a[slot]);  // [T x r]
    Var u = num::ag::matmul_nt(t, h, lora->b[slot]);  // [T x d_out]
    y = num::ag::add(t, y, num::ag::scale(t, u, lora->scaling));
  }
  return y;
}

Var hidden_graph(num::Tape& t, const TransformerLM& model, const ModelBinding& b, std::span<const std::int32_t> tokens,
                 std::span<const std::size_t> segment_starts, const LoraBinding* lora, std::vector<Var>* taps_before,
                 std::vector<Var>* taps_after) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw ConfigError("forward: empty token sequence");
  std::vector<std::size_t> starts(segment_starts.begin(), segment_starts.end());
  if (starts.empty() || starts.front() != 0) starts.insert(starts.begin(), 0);
  std::vector<std::int32_t> positions(tokens.size());
  for (std::size_t s = 0; s < starts.size(); ++s) {
    const std::size_t end = s + 1 < starts.size() ? starts[s + 1] : tokens.size();
    if (end <= starts[s] || end > tokens.size()) throw ConfigError("forward: invalid segment boundaries");
    if (end - starts[s] > sz(cfg.max_seq_len))
      throw ConfigError("forward: sequence of " + std::to_string(end - starts[s]) + " tokens exceeds context " +
                        std::to_string(cfg.max_seq_len));
    for (std::size_t i = starts[s]; i < end; ++i) positions[i] = static_cast<std::int32_t>(i - starts[s]);
  }
  for (auto id : tokens)
    if (id < 0 || id >= cfg.vocab_size) throw ConfigError("forward: token id out of vocabulary");
  if (lora && (lora->a.size() != model.layers.size() * 2 || lora->b.size() != model.layers.size() * 2))
    throw ShapeError("forward: adapter does not cover every FFN matrix");

  Var h = num::ag::add(t, num::ag::embedding(t, b.vars[0], tokens), num::ag::embedding(t, b.vars[1], positions));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerVars w = layer_vars(b, l);
    Var a = num::ag::layer_norm(t, h, w.attn_g, w.attn_b, kNormEps);
    Var q = num::ag::matmul(t, a, w.wq);
    Var k = num::ag::matmul(t, a, w.wk);
    Var v = num::ag::matmul(t, a, w.wv);
    Var att = num::ag::causal_attention(t, q, k, v, sz(cfg.n_heads), starts);
    h = num::ag::add(t, h, num::ag::matmul(t, att, w.wo));
    if (taps_before) taps_before->push_back(h);
    Var f = num::ag::layer_norm(t, h, w.ffn_g, w.ffn_b, kNormEps);
    Var u = num::ag::add_row(t, linear(t, f, w.w_in, lora, l * 2), w.b_in);
    Var o = num::ag::add_row(t, linear(t, num::ag::gelu(t, u), w.w_out, lora, l * 2 + 1), w.b_out);
    h = num::ag::add(t, h, o);
    if (taps_after) taps_after->push_back(h);
  }
  return h;
}

// Final norm + unembedding of a single hidden row.
std::vector<float> project_row(const TransformerLM& model, std::span<const float> hidden) {
  const std::size_t d = sz(model.config().d_model), V = sz(model.config().vocab_size);
  std::vector<float> normed(d);
  num::layer_norm_row(hidden, model.final_norm_gain.values(), model.final_norm_bias.values(), kNormEps, normed);
  std::vector<float> logits(V);
  if (model.config().tie_embeddings)
    num::gemm(false, true, 1, V, d, 1.0f, normed.data(), d, model.tok_emb.data(), d, 0.0f, logits.data(), V);
  else
    num::gemm(false, false, 1, V, d, 1.0f, normed.data(), d, model.unembed.data(), V, 0.0f, logits.data(), V);
  return logits;
}

}  // namespace

Var forward_graph(num::Tape& t, const TransformerLM& model, const ModelBinding& b, std::span<const std::int32_t> tokens,
                  std::span<const std::size_t> segment_starts, const LoraBinding* lora, std::vector<Var>* taps_before,
                  std::vector<Var>* taps_after) {
  Var h = hidden_graph(t, model, b, tokens, segment_starts, lora, taps_before, taps_after);
  const std::size_t n = b.vars.size();
  const bool tied = model.config().tie_embeddings;
  const Var fg = b.vars[tied ? n - 2 : n - 3];
  const Var fb = b.vars[tied ? n - 1 : n - 2];
  Var normed = num::ag::layer_norm(t, h, fg, fb, kNormEps);
  return tied ? num::ag::matmul_nt(t, normed, b.vars[0]) : num::ag::matmul(t, normed, b.vars[n - 1]);
}

ForwardResult forward(const TransformerLM& model, std::span<const std::int32_t> tokens, const lora::DeltaSet* delta,
                      bool want_taps) {
  std::optional<TransformerLM> effective;
  if (delta) effective = model.with_delta(*delta);
  const TransformerLM& m = effective ? *effective : model;

  num::Tape tape;
  const ModelBinding b = bind_model(tape, m, false);
  std::vector<Var> before, after;
  Var logits = forward_graph(tape, m, b, tokens, {}, nullptr, want_taps ? &before : nullptr,
                             want_taps ? &after : nullptr);
  ForwardResult r{tape.value(logits), std::nullopt};
  if (want_taps) {
    ResidualTaps taps;
    taps.positions.resize(tokens.size());
    std::iota(taps.positions.begin(), taps.positions.end(), std::size_t{0});
    for (std::size_t l = 0; l < before.size(); ++l) {
      taps.before.push_back(tape.value(before[l]));
      taps.after.push_back(tape.value(after[l]));
    }
    r.taps = std::move(taps);
  }
  return r;
}

std::vector<float> logit_lens(const TransformerLM& model, std::span<const float> hidden) {
  if (hidden.size() != sz(model.config().d_model))
    throw ShapeError("logit_lens: hidden vector has length " + std::to_string(hidden.size()) + ", expected " +
                     std::to_string(model.config().d_model));
  auto p = project_row(model, hidden);
  num::softmax_inplace(p);
  return p;
}

DecodeResult greedy_decode(const TransformerLM& model, std::span<const std::int32_t> prompt,
                           const lora::DeltaSet* delta, std::size_t max_new, std::int32_t eos, bool want_taps) {
  if (prompt.empty()) throw ConfigError("greedy_decode: empty prompt");
  const std::size_t ctx = sz(model.config().max_seq_len);
  if (prompt.size() > ctx)
    throw ConfigError("greedy_decode: prompt of " + std::to_string(prompt.size()) + " tokens exceeds context " +
                      std::to_string(ctx));
  std::optional<TransformerLM> effective;
  if (delta) effective = model.with_delta(*delta);
  const TransformerLM& m = effective ? *effective : model;
  const std::size_t d = sz(m.config().d_model);
  const std::size_t L = m.layers.size();

  DecodeResult out;
  if (want_taps) {
    out.taps.emplace();
    out.taps->before.assign(L, Tensor());
    out.taps->after.assign(L, Tensor());
  }
  std::vector<std::vector<float>> before_rows(L), after_rows(L);
  std::vector<std::int32_t> seq(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_new && seq.size() <= ctx; ++step) {
    num::Tape tape;
    const ModelBinding b = bind_model(tape, m, false);
    std::vector<Var> tb, ta;
    Var h = hidden_graph(tape, m, b, seq, {}, nullptr, want_taps ? &tb : nullptr, want_taps ? &ta : nullptr);
    const std::size_t last = seq.size() - 1;
    const auto logits = project_row(m, tape.value(h).row(last));
    const auto next = static_cast<std::int32_t>(num::argmax(logits));
    if (want_taps) {
      out.taps->positions.push_back(last);
      for (std::size_t l = 0; l < L; ++l) {
        auto rb = tape.value(tb[l]).row(last);
        auto ra = tape.value(ta[l]).row(last);
        before_rows[l].insert(before_rows[l].end(), rb.begin(), rb.end());
        after_rows[l].insert(after_rows[l].end(), ra.begin(), ra.end());
      }
    }
    if (next == eos) {
      out.hit_eos = true;
      break;
    }
    out.tokens.push_back(next);
    seq.push_back(next);
  }
  if (want_taps && !out.taps->positions.empty()) {
    const std::size_t P = out.taps->positions.size();
    for (std::size_t l = 0; l < L; ++l) {
      out.taps->before[l] = Tensor({P, d}, std::move(before_rows[l]));
      out.taps->after[l] = Tensor({P, d}, std::move(after_rows[l]));
    }
  } else if (want_taps) {
    out.taps->before.clear();
    out.taps->after.clear();
  }
  return out;
}

namespace {

struct Packed {
  std::vector<std::int32_t> inputs, targets;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> starts;
};

void pack_sequence(Packed& p, std::span<const std::int32_t> seq, std::size_t ctx) {
  // [EOS] + seq + [EOS], cropped so the input fits the context.
  std::vector<std::int32_t> framed;
  framed.reserve(seq.size() + 2);
  framed.push_back(Tokenizer::kEos);
  framed.insert(framed.end(), seq.begin(), seq.end());
  framed.push_back(Tokenizer::kEos);
  if (framed.size() > ctx + 1) framed.resize(ctx + 1);
  p.starts.push_back(p.inputs.size());
  for (std::size_t i = 0; i + 1 < framed.size(); ++i) {
    p.inputs.push_back(framed[i]);
    p.targets.push_back(framed[i + 1]);
    p.mask.push_back(1);
  }
}

}  // namespace

float sequence_nll(const TransformerLM& model, const std::vector<std::vector<std::int32_t>>& sequences) {
  double total = 0.0;
  std::size_t count = 0;
  const std::size_t ctx = sz(model.config().max_seq_len);
  for (std::size_t i = 0; i < sequences.size();) {
    Packed p;
    for (std::size_t n = 0; n < 32 && i < sequences.size(); ++n, ++i) pack_sequence(p, sequences[i], ctx);
    num::Tape tape;
    const ModelBinding b = bind_model(tape, model, false);
    Var logits = forward_graph(tape, model, b, p.inputs, p.starts);
    const float nll = num::cross_entropy_nll(tape.value(logits), p.targets, p.mask);
    total += static_cast<double>(nll) * static_cast<double>(p.inputs.size());
    count += p.inputs.size();
  }
  if (count == 0) throw ConfigError("sequence_nll: no sequences");
  return static_cast<float>(total / static_cast<double>(count));
}

TransformerLM train_base(const ModelConfig& config, const std::vector<std::vector<std::int32_t>>& corpus,
                         const BaseTrainConfig& train, BaseTrainReport* report,
                         const std::function<void(std::int64_t, float)>& on_step) {
  if (corpus.empty()) throw ConfigError("train_base: empty corpus");
  TransformerLM model = TransformerLM::init(config, train.seed);
  const std::size_t ctx = sz(config.max_seq_len);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(mix_seed(train.seed, "holdout"));
  split_rng.shuffle(order);
  std::size_t n_hold = static_cast<std::size_t>(static_cast<double>(corpus.size()) * train.holdout_fraction);
  if (n_hold >= corpus.size()) n_hold = corpus.size() - 1;
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::vector<std::vector<std::int32_t>> heldout;
  for (std::size_t i = 0; i < n_hold; ++i) heldout.push_back(corpus[order[i]]);

  auto named = model.named_parameters();
  std::vector<Tensor*> params;
  for (auto& n : named) params.push_back(n.tensor);
  num::AdamState state;
  Rng rng(mix_seed(train.seed, "batches"));

  if (report) {
    report->train_sequences = train_idx.size();
    report->heldout_sequences = heldout.size();
    report->uniform_nll = std::log(static_cast<float>(config.vocab_size));
  }
  for (std::int64_t step = 0; step < train.steps; ++step) {
    Packed p;
    for (std::size_t n = 0; n < train.batch_sequences; ++n)
      pack_sequence(p, corpus[train_idx[rng.below(train_idx.size())]], ctx);
    num::Tape tape;
    const ModelBinding b = bind_model(tape, model, true);
    Var logits = forward_graph(tape, model, b, p.inputs, p.starts);
    Var loss = num::ag::cross_entropy(tape, logits, p.targets, p.mask);
    tape.backward(loss);

    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Var v : b.vars) grads.push_back(tape.grad(v));
    std::vector<Tensor*> gptr;
    std::vector<const Tensor*> cgptr;
    for (auto& g : grads) gptr.push_back(&g), cgptr.push_back(&g);
    if (train.clip_norm > 0.0f) num::clip_grad_norm(gptr, train.clip_norm);

    float lr_scale = 1.0f;
    if (step < train.warmup) {
      lr_scale = static_cast<float>(step + 1) / static_cast<float>(train.warmup);
    } else if (train.steps > train.warmup) {
      const double progress =
          static_cast<double>(step - train.warmup) / static_cast<double>(std::max<std::int64_t>(1, train.steps - train.warmup));
      lr_scale = train.min_lr_fraction +
                 (1.0f - train.min_lr_fraction) * static_cast<float>(0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
    }
    num::AdamConfig adam;
    adam.lr = train.lr * lr_scale;
    num::adam_step(params, cgptr, state, adam);

    const float lv = tape.value(loss)[0];
    if (report) report->step_loss.push_back(lv);
    if (on_step) on_step(step, lv);
  }
  if (report && !heldout.empty()) report->heldout_nll = sequence_nll(model, heldout);
  return model;
}

void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path) {
  io::BinaryWriter w;
  const auto& c = model.config();
  w.raw("PRAGCKPT");
  w.u32(1);
  for (auto v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len}) w.i32(v);
  w.i32(c.tie_embeddings ? 1 : 0);
  const auto named = model.named_parameters();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) w.tensor(name, *t);
  w.seal();
  io::write_file_atomic(path, w.bytes());
}

TransformerLM load_checkpoint(const std::filesystem::path& path) {
  auto r = io::BinaryReader::sealed(io::read_file(path), "checkpoint " + path.string());
  if (r.raw(8) != "PRAGCKPT") r.fail("bad magic");
  if (r.u32() != 1) r.fail("unsupported version");
  ModelConfig c;
  c.vocab_size = r.i32();
  c.d_model = r.i32();
  c.n_layers = r.i32();
  c.n_heads = r.i32();
  c.d_ff = r.i32();
  c.max_seq_len = r.i32();
  c.tie_embeddings = r.i32() != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  TransformerLM m = TransformerLM::init(c, 0);
  auto named = m.named_parameters();
  if (r.u32() != named.size()) r.fail("matrix count does not match config");
  for (auto& n : named) {
    auto [name, t] = r.tensor();
    if (name != n.name) r.fail("expected matrix " + n.name + ", found " + name);
    if (t.shape() != n.tensor->shape()) r.fail("shape mismatch for " + name);
    *n.tensor = std::move(t);
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return m;
}

}  // namespace prag::lm
