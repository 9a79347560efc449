#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prag/autograd.hpp"
#include "prag/delta.hpp"
#include "prag/tensor.hpp"

namespace prag::lm {

using num::Tensor;
using num::Var;

struct ModelConfig {
  std::int32_t vocab_size = 0;
  std::int32_t d_model = 128;
  std::int32_t n_layers = 4;
  std::int32_t n_heads = 4;
  std::int32_t d_ff = 512;
  std::int32_t max_seq_len = 256;
  bool tie_embeddings = true;

  /// Throws ConfigError on non-positive sizes or d_model % n_heads != 0.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor wq, wk, wv, wo;  // [d_model x d_model]
  Tensor ffn_norm_gain, ffn_norm_bias;
  Tensor w_in;   // [d_model x d_ff]
  Tensor b_in;   // [d_ff]
  Tensor w_out;  // [d_ff x d_model]
  Tensor b_out;  // [d_model]
};

/// Pre-norm decoder-only transformer with learned absolute positions.
class TransformerLM {
 public:
  TransformerLM() = default;

  /// Gaussian(0, 0.02) weights, residual projections scaled by 1/sqrt(2L),
  /// unit norm gains; deterministic in `seed`.
  static TransformerLM init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  Tensor tok_emb;  // [V x d_model]
  Tensor pos_emb;  // [max_seq_len x d_model]
  std::vector<LayerWeights> layers;
  Tensor final_norm_gain, final_norm_bias;
  Tensor unembed;  // [d_model x V]; empty when embeddings are tied

  struct Named {
    std::string name;
    Tensor* tensor;
  };
  /// Every trainable tensor with a stable checkpoint name.
  std::vector<Named> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;

  const Tensor& ffn_weight(std::size_t layer, lora::FfnRole role) const;

  /// Copy with every FFN matrix W replaced by W + delta(W).
  TransformerLM with_delta(const lora::DeltaSet& delta) const;
  /// Throws ShapeError if `delta` does not cover exactly this model's FFN matrices.
  void check_delta(const lora::DeltaSet& delta) const;

  /// Checksum over all parameter bytes (frozen-base audits).
  std::string weights_digest() const;

 private:
  explicit TransformerLM(const ModelConfig& config) : config_(config) {}
  ModelConfig config_;
};

/// Hidden states around each FFN block: `before[l]` is the residual stream
/// entering layer l's FFN sub-block (after the attention residual add, before
/// the FFN pre-norm); `after[l]` is the stream after the FFN residual add.
/// Row i of each matrix belongs to positions[i].
struct ResidualTaps {
  std::vector<std::size_t> positions;
  std::vector<Tensor> before;  // per layer [P x d_model]
  std::vector<Tensor> after;
  std::size_t n_layers() const noexcept { return before.size(); }
};

struct ForwardResult {
  Tensor logits;  // [T x V]
  std::optional<ResidualTaps> taps;
};

/// Runs the model over `tokens` (causal). With `delta`, every FFN weight W is
/// used as W + delta(W).
ForwardResult forward(const TransformerLM& model, std::span<const std::int32_t> tokens,
                      const lora::DeltaSet* delta = nullptr, bool want_taps = false);

/// Low-rank adapters bound on a tape, indexed `layer * 2 + role`.
struct LoraBinding {
  float scaling = 1.0f;
  std::vector<Var> a;  // [r x d_in]
  std::vector<Var> b;  // [d_out x r]
};

/// Model weights bound on a tape, same order as named_parameters().
struct ModelBinding {
  std::vector<Var> vars;
};

ModelBinding bind_model(num::Tape& tape, const TransformerLM& model, bool trainable);

/// Builds the forward graph over packed sequences; `segment_starts` lists the
/// first row of each independent sequence (positions restart per segment).
/// Returns logits [T x V].
Var forward_graph(num::Tape& tape, const TransformerLM& model, const ModelBinding& binding,
                  std::span<const std::int32_t> tokens, std::span<const std::size_t> segment_starts,
                  const LoraBinding* lora = nullptr, std::vector<Var>* taps_before = nullptr,
                  std::vector<Var>* taps_after = nullptr);

/// softmax(final_norm(hidden) * W_U).
std::vector<float> logit_lens(const TransformerLM& model, std::span<const float> hidden);

struct DecodeResult {
  std::vector<std::int32_t> tokens;  // generated ids, EOS excluded
  bool hit_eos = false;
  /// One row per decoding step (including the step that produced EOS),
  /// taken at the position whose logits chose that step's token.
  std::optional<ResidualTaps> taps;
};

/// Greedy decoding; each step takes the argmax with ties to the lowest id.
DecodeResult greedy_decode(const TransformerLM& model, std::span<const std::int32_t> prompt,
                           const lora::DeltaSet* delta, std::size_t max_new, std::int32_t eos, bool want_taps = false);

struct BaseTrainConfig {
  std::int64_t steps = 8000;
  std::size_t batch_sequences = 16;
  float lr = 3e-3f;
  std::int64_t warmup = 100;
  float min_lr_fraction = 0.1f;
  float clip_norm = 1.0f;
  double holdout_fraction = 0.02;
  std::uint64_t seed = 1;
};

struct BaseTrainReport {
  std::vector<float> step_loss;
  float heldout_nll = 0.0f;
  float uniform_nll = 0.0f;
  std::size_t train_sequences = 0, heldout_sequences = 0;
};

/// Next-token pretraining from a seeded initialization. Every sequence is
/// framed as [EOS] + tokens + [EOS]; longer inputs are cropped to the context.
TransformerLM train_base(const ModelConfig& config, const std::vector<std::vector<std::int32_t>>& corpus,
                         const BaseTrainConfig& train, BaseTrainReport* report = nullptr,
                         const std::function<void(std::int64_t, float)>& on_step = {});

/// Mean next-token NLL of framed sequences.
float sequence_nll(const TransformerLM& model, const std::vector<std::vector<std::int32_t>>& sequences);

/// Binary checkpoint: "PRAGCKPT", u32 version, ModelConfig as seven i32
/// (vocab, d_model, layers, heads, d_ff, max_seq_len, tie), u32 matrix count,
/// named matrices, SHA-256 trailer.
void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path);
TransformerLM load_checkpoint(const std::filesystem::path& path);

}  // namespace prag::lm
