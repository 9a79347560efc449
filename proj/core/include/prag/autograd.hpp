#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "prag/tensor.hpp"

namespace prag::num {

/// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::uint32_t>::max(); }
};

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
/// sequence is topologically sorted by construction; backward() walks it once
/// in reverse. Single owner, not thread-safe.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient; owns its value.
  Var constant(Tensor value);
  /// Non-owning leaf; `value` must outlive the tape.
  Var constant_ref(const Tensor& value);
  /// Non-owning leaf that receives a gradient.
  Var parameter(const Tensor& value);
  Var parameter_owned(Tensor value);

  /// Appends an op result. `fn` is kept only when `requires_grad` is set.
  Var record(Tensor value, bool requires_grad, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient accumulated by backward(); zeros if none flowed to `v`.
  Tensor grad(Var v) const;
  /// Adds `g` into the gradient slot of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g);
  /// Mutable gradient buffer of `v`, zero-initialised on first use.
  Tensor& grad_buffer(Var v);

  /// Runs the reverse pass from a scalar (single-element) loss.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::optional<Tensor> owned;
    const Tensor* ref = nullptr;
    bool requires_grad = false;
    std::optional<Tensor> grad;
    BackwardFn backward;
    const Tensor& value() const { return owned ? *owned : *ref; }
  };
  const Node& node(Var v) const;
  Node& node(Var v);
  std::vector<Node> nodes_;
};

/// Differentiable ops. Each records itself on the tape; gradients are only
/// computed for inputs that require them.
namespace ag {

Var matmul(Tape& t, Var a, Var b);
/// a * b^T.
Var matmul_nt(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// x[T x n] + bias[n] broadcast over rows.
Var add_row(Tape& t, Var x, Var bias);
Var scale(Tape& t, Var x, float s);
Var mul(Tape& t, Var a, Var b);
Var sum(Tape& t, Var x);
Var gelu(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, float eps = 1e-5f);
/// Rows of `table` selected by `ids`.
Var embedding(Tape& t, Var table, std::span<const std::int32_t> ids);
/// Multi-head causal self-attention over packed segments. q/k/v are [T x d];
/// `segment_starts` lists the first row of every independent sequence.
Var causal_attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, std::span<const std::size_t> segment_starts);
/// Mean token NLL over rows with mask != 0; scalar output.
Var cross_entropy(Tape& t, Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask);

}  // namespace ag
}  // namespace prag::num
