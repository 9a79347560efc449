#include "prag/optim.hpp"

#include <cmath>

#include "prag/error.hpp"

namespace prag::num {

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  const float step_size = static_cast<float>(cfg.lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (p.shape() != g.shape() || state.m[i].shape() != p.shape())
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i));
    float* pv = p.data();
    const float* gv = g.data();
    float* mv = state.m[i].data();
    float* vv = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      mv[j] = cfg.beta1 * mv[j] + (1.0f - cfg.beta1) * gv[j];
      vv[j] = cfg.beta2 * vv[j] + (1.0f - cfg.beta2) * gv[j] * gv[j];
      pv[j] -= step_size * mv[j] / (std::sqrt(vv[j] * inv_bc2) + cfg.eps);
    }
  }
}

float clip_grad_norm(std::span<Tensor* const> grads, float max_norm) {
  double sq = 0.0;
  for (const Tensor* g : grads)
    for (float v : g->values()) sq += static_cast<double>(v) * v;
  const float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    const float s = max_norm / norm;
    for (Tensor* g : grads)
      for (float& v : g->values()) v *= s;
  }
  return norm;
}

}  // namespace prag::num
