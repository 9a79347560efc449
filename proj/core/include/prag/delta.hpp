#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prag/tensor.hpp"

namespace prag::lora {

/// Which FFN matrix of a layer an adapter target refers to.
enum class FfnRole : std::uint8_t { In = 0, Out = 1 };

std::string role_name(FfnRole role);

/// Dense additive update for every FFN matrix of the model, indexed
/// `layer * 2 + role`. Each delta is stored in the layout of the weight it
/// updates ([d_in x d_out], activations multiply from the left).
struct DeltaSet {
  std::vector<num::Tensor> deltas;

  std::size_t n_layers() const noexcept { return deltas.size() / 2; }
  num::Tensor& at(std::size_t layer, FfnRole role) { return deltas[layer * 2 + static_cast<std::size_t>(role)]; }
  const num::Tensor& at(std::size_t layer, FfnRole role) const {
    return deltas[layer * 2 + static_cast<std::size_t>(role)];
  }
  bool all_finite() const;
};

}  // namespace prag::lora
