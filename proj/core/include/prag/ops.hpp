#pragma once

#include <cstdint>
#include <span>

#include "prag/tensor.hpp"

namespace prag::num {

/// C = alpha * op(A) * op(B) + beta * C on row-major buffers (BLAS sgemm).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc);

/// [m x k] * [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T for a [m x k], b [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a^T * b for a [k x m], b [k x n].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& a, const Tensor& b, float scale = 1.0f);

/// Numerically stable softmax along `axis` (negative counts from the end).
Tensor softmax(const Tensor& x, int axis = -1);
void softmax_inplace(std::span<float> row);

/// Row-wise layer norm over the last dimension with affine gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
void layer_norm_row(std::span<const float> x, std::span<const float> gain, std::span<const float> bias, float eps,
                    std::span<float> out);

float gelu(float x);
float gelu_grad(float x);

/// Mean of -log softmax(logits)[t, target_t] over rows with mask[t] != 0.
/// Throws ConfigError when no row is selected.
float cross_entropy_nll(const Tensor& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask);

/// Index of the maximum; ties resolve to the lowest index.
std::size_t argmax(std::span<const float> values);

}  // namespace prag::num
