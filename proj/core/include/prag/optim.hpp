#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "prag/tensor.hpp"

namespace prag::num {

struct AdamConfig {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// First/second moment estimates for a fixed list of parameter tensors.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of `params` in place. `state` is sized on
/// first use; later calls must pass tensors of the same shapes.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state,
               const AdamConfig& cfg);

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
float clip_grad_norm(std::span<Tensor* const> grads, float max_norm);

}  // namespace prag::num
