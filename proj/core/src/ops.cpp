#include "prag/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "prag/error.hpp"

namespace prag::num {

namespace {
// Results must not depend on the BLAS thread count; callers parallelize above.
const bool kSingleThreadBlas = [] {
  openblas_set_num_threads(1);
  return true;
}();
}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = beta == 0.0f ? 0.0f : beta * c[i * ldc + j];
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
              static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor c({a.rows(), b.cols()});
  gemm(false, false, a.rows(), b.cols(), a.cols(), 1.0f, a.data(), a.cols(), b.data(), b.cols(), 0.0f, c.data(),
       c.cols());
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  Tensor c({a.rows(), b.rows()});
  gemm(false, true, a.rows(), b.rows(), a.cols(), 1.0f, a.data(), a.cols(), b.data(), b.cols(), 0.0f, c.data(),
       c.cols());
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw ShapeError("matmul_tn: " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  Tensor c({a.cols(), b.cols()});
  gemm(true, false, a.cols(), b.cols(), a.rows(), 1.0f, a.data(), a.cols(), b.data(), b.cols(), 0.0f, c.data(),
       c.cols());
  return c;
}

Tensor transpose(const Tensor& a) {
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

void add_inplace(Tensor& a, const Tensor& b, float scale) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += scale * pb[i];
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) return;
  const float mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (float& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const float inv = static_cast<float>(1.0 / sum);
  for (float& v : row) v *= inv;
}

Tensor softmax(const Tensor& x, int axis) {
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: invalid axis for " + shape_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);

  Tensor out = x;
  std::vector<float> buf(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      float* base = out.data() + o * n * inner + in;
      for (std::size_t i = 0; i < n; ++i) buf[i] = base[i * inner];
      softmax_inplace(buf);
      for (std::size_t i = 0; i < n; ++i) base[i * inner] = buf[i];
    }
  }
  return out;
}

void layer_norm_row(std::span<const float> x, std::span<const float> gain, std::span<const float> bias, float eps,
                    std::span<float> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>((x[i] - mean) * inv) * gain[i] + bias[i];
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  if (!(eps > 0.0f)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t n = x.shape().back();
  expect_shape(gain, {n}, "layer_norm gain");
  expect_shape(bias, {n}, "layer_norm bias");
  Tensor out(x.shape());
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    layer_norm_row(x.values().subspan(r * n, n), gain.values(), bias.values(), eps, out.values().subspan(r * n, n));
  return out;
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
}

float gelu(float x) { return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + 0.044715f * x * x * x))); }

float gelu_grad(float x) {
  const float u = kGeluC * (x + 0.044715f * x * x * x);
  const float t = std::tanh(u);
  const float du = kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

float cross_entropy_nll(const Tensor& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows || mask.size() != rows) throw ShapeError("cross_entropy_nll: target/mask length");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    const auto target = targets[t];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab)
      throw ConfigError("cross_entropy_nll: target id out of range");
    const auto row = logits.row(t);
    const float mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (float v : row) sum += std::exp(static_cast<double>(v - mx));
    total += std::log(sum) + mx - row[static_cast<std::size_t>(target)];
    ++count;
  }
  if (count == 0) throw ConfigError("cross_entropy_nll: mask selects no positions");
  return static_cast<float>(total / static_cast<double>(count));
}

std::size_t argmax(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace prag::num
