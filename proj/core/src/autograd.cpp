#include "prag/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "prag/error.hpp"
#include "prag/ops.hpp"

namespace prag::num {

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(const Tensor& value) {
  Node n;
  n.ref = &value;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter_owned(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw Error("tape: invalid variable");
  return nodes_[v.id];
}

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw Error("tape: invalid variable");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value(); }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad) return *n.grad;
  return Tensor(n.value().shape());
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.grad) n.grad = Tensor(n.value().shape());
  return *n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (!n.grad) {
    if (g.shape() != n.value().shape()) throw ShapeError("tape: gradient shape mismatch");
    n.grad = g;
  } else {
    add_inplace(*n.grad, g);
  }
}

void Tape::backward(Var loss) {
  Node& root = node(loss);
  if (root.value().size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_string(root.value().shape()));
  if (!root.requires_grad) return;
  root.grad = Tensor::filled(root.value().shape(), 1.0f);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || !n.grad) continue;
    n.backward(*this, *n.grad);
  }
}

namespace ag {

namespace {

bool any_grad(const Tape& t, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (t.requires_grad(v)) return true;
  return false;
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  Tensor out = num::matmul(t.value(a), t.value(b));
  return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      gemm(false, true, g.rows(), bv.rows(), g.cols(), 1.0f, g.data(), g.cols(), bv.data(), bv.cols(), 1.0f, ga.data(),
           ga.cols());
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      gemm(true, false, av.cols(), g.cols(), av.rows(), 1.0f, av.data(), av.cols(), g.data(), g.cols(), 1.0f, gb.data(),
           gb.cols());
    }
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  Tensor out = num::matmul_nt(t.value(a), t.value(b));
  return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    // out = a b^T: da = g b, db = g^T a
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      gemm(false, false, g.rows(), bv.cols(), g.cols(), 1.0f, g.data(), g.cols(), bv.data(), bv.cols(), 1.0f,
           ga.data(), ga.cols());
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      gemm(true, false, g.cols(), av.cols(), g.rows(), 1.0f, g.data(), g.cols(), av.data(), av.cols(), 1.0f, gb.data(),
           gb.cols());
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  Tensor out = num::add(t.value(a), t.value(b));
  return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_row(Tape& t, Var x, Var bias) {
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  expect_shape(bv, {xv.cols()}, "add_row bias");
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return t.record(std::move(out), any_grad(t, {x, bias}), [x, bias](Tape& tp, const Tensor& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(bias)) {
      Tensor& gb = tp.grad_buffer(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

Var scale(Tape& t, Var x, float s) {
  Tensor out = t.value(x);
  for (float& v : out.values()) v *= s;
  return t.record(std::move(out), t.requires_grad(x), [x, s](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    add_inplace(gx, g, s);
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("mul: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av2 = tp.value(a);
    const Tensor& bv2 = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

Var sum(Tape& t, Var x) {
  double s = 0.0;
  for (float v : t.value(x).values()) s += v;
  return t.record(Tensor({1}, {static_cast<float>(s)}), t.requires_grad(x), [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (float& v : gx.values()) v += g[0];
  });
}

Var gelu(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (float& v : out.values()) v = num::gelu(v);
  return t.record(std::move(out), t.requires_grad(x), [x](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(x);
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_grad(xv[i]);
  });
}

Var softmax_rows(Tape& t, Var x) {
  Tensor out = num::softmax(t.value(x), -1);
  const Var self{static_cast<std::uint32_t>(t.size())};
  return t.record(std::move(out), t.requires_grad(x), [x, self](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_buffer(x);
    const std::size_t n = y.shape().back();
    const std::size_t rows = y.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c)
        gx[r * n + c] += y[r * n + c] * (g[r * n + c] - static_cast<float>(dot));
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, float eps) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  const std::size_t n = xv.shape().back();
  expect_shape(gv, {n}, "layer_norm gain");
  expect_shape(bv, {n}, "layer_norm bias");
  const std::size_t rows = xv.size() / n;
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<float> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(inv);
    for (std::size_t c = 0; c < n; ++c) {
      const float h = static_cast<float>((xr[c] - mean) * inv);
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  return t.record(std::move(out), any_grad(t, {x, gain, bias}),
                  [x, gain, bias, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp,
                                                                                                  const Tensor& g) {
                    const Tensor& gv2 = tp.value(gain);
                    if (tp.requires_grad(gain)) {
                      Tensor& gg = tp.grad_buffer(gain);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xhat[r * n + c];
                    }
                    if (tp.requires_grad(bias)) {
                      Tensor& gb = tp.grad_buffer(bias);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                    }
                    if (tp.requires_grad(x)) {
                      Tensor& gx = tp.grad_buffer(x);
                      std::vector<float> dxhat(n);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t c = 0; c < n; ++c) {
                          dxhat[c] = g[r * n + c] * gv2[c];
                          mean_d += dxhat[c];
                          mean_dx += dxhat[c] * xhat[r * n + c];
                        }
                        mean_d /= static_cast<double>(n);
                        mean_dx /= static_cast<double>(n);
                        for (std::size_t c = 0; c < n; ++c)
                          gx[r * n + c] += inv_std[r] * static_cast<float>(dxhat[c] - mean_d -
                                                                           xhat[r * n + c] * mean_dx);
                      }
                    }
                  });
}

Var embedding(Tape& t, Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = t.value(table);
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) throw ConfigError("embedding: id out of range");
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return t.record(std::move(out), t.requires_grad(table), [table, d, saved = std::move(saved)](Tape& tp,
                                                                                              const Tensor& g) {
    Tensor& gt = tp.grad_buffer(table);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      float* dst = gt.data() + static_cast<std::size_t>(saved[i]) * d;
      const float* src = g.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var causal_attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, std::span<const std::size_t> segment_starts) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  const std::size_t rows = qv.rows(), d = qv.cols();
  if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) throw ShapeError("attention: q/k/v shapes differ");
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention: d_model not divisible by heads");
  const std::size_t dh = d / n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<std::size_t> bounds(segment_starts.begin(), segment_starts.end());
  if (bounds.empty() || bounds.front() != 0) bounds.insert(bounds.begin(), 0);
  bounds.push_back(rows);

  // Attention probabilities per (segment, head), kept for the reverse pass.
  std::vector<Tensor> probs;
  probs.reserve((bounds.size() - 1) * n_heads);
  Tensor out({rows, d});
  for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
    const std::size_t start = bounds[s], len = bounds[s + 1] - bounds[s];
    if (len == 0) throw ShapeError("attention: empty segment");
    for (std::size_t h = 0; h < n_heads; ++h) {
      Tensor p({len, len});
      gemm(false, true, len, len, dh, scale, qv.data() + start * d + h * dh, d, kv.data() + start * d + h * dh, d, 0.0f,
           p.data(), len);
      for (std::size_t i = 0; i < len; ++i) {
        auto row = p.row(i);
        softmax_inplace(row.subspan(0, i + 1));
        std::fill(row.begin() + static_cast<std::ptrdiff_t>(i) + 1, row.end(), 0.0f);
      }
      gemm(false, false, len, dh, len, 1.0f, p.data(), len, vv.data() + start * d + h * dh, d, 0.0f,
           out.data() + start * d + h * dh, d);
      probs.push_back(std::move(p));
    }
  }

  return t.record(std::move(out), any_grad(t, {q, k, v}),
                  [q, k, v, n_heads, d, dh, scale, bounds = std::move(bounds), probs = std::move(probs)](
                      Tape& tp, const Tensor& g) {
                    const Tensor& qv2 = tp.value(q);
                    const Tensor& kv2 = tp.value(k);
                    const Tensor& vv2 = tp.value(v);
                    const bool need_q = tp.requires_grad(q), need_k = tp.requires_grad(k), need_v = tp.requires_grad(v);
                    float* gq = need_q ? tp.grad_buffer(q).data() : nullptr;
                    float* gk = need_k ? tp.grad_buffer(k).data() : nullptr;
                    float* gv = need_v ? tp.grad_buffer(v).data() : nullptr;
                    std::size_t idx = 0;
                    for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
                      const std::size_t start = bounds[s], len = bounds[s + 1] - bounds[s];
                      for (std::size_t h = 0; h < n_heads; ++h, ++idx) {
                        const Tensor& p = probs[idx];
                        const std::size_t off = start * d + h * dh;
                        if (need_v)
                          gemm(true, false, len, dh, len, 1.0f, p.data(), len, g.data() + off, d, 1.0f, gv + off, d);
                        if (!need_q && !need_k) continue;
                        // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
                        Tensor ds({len, len});
                        gemm(false, true, len, len, dh, 1.0f, g.data() + off, d, vv2.data() + off, d, 0.0f, ds.data(),
                             len);
                        for (std::size_t i = 0; i < len; ++i) {
                          auto dp = ds.row(i);
                          auto pr = p.row(i);
                          double dot = 0.0;
                          for (std::size_t j = 0; j <= i; ++j) dot += dp[j] * pr[j];
                          for (std::size_t j = 0; j < len; ++j)
                            dp[j] = j <= i ? pr[j] * (dp[j] - static_cast<float>(dot)) : 0.0f;
                        }
                        if (need_q)
                          gemm(false, false, len, dh, len, scale, ds.data(), len, kv2.data() + off, d, 1.0f, gq + off,
                               d);
                        if (need_k)
                          gemm(true, false, len, dh, len, scale, ds.data(), len, qv2.data() + off, d, 1.0f, gk + off,
                               d);
                      }
                    }
                  });
}

Var cross_entropy(Tape& t, Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
  const Tensor& lv = t.value(logits);
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows || mask.size() != rows) throw ShapeError("cross_entropy: target/mask length");
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw ConfigError("cross_entropy: mask selects no positions");

  // Probabilities of selected rows are kept for the reverse pass.
  Tensor probs({rows, vocab});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const auto target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) throw ConfigError("cross_entropy: target out of range");
    auto row = lv.row(r);
    auto pr = probs.row(r);
    const float mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      pr[c] = std::exp(row[c] - mx);
      sum += pr[c];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (float& p : pr) p *= inv;
    total += std::log(sum) + mx - row[static_cast<std::size_t>(target)];
  }
  const float loss = static_cast<float>(total / static_cast<double>(count));
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return t.record(Tensor({1}, {loss}), t.requires_grad(logits),
                  [logits, count, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)](
                      Tape& tp, const Tensor& g) {
                    Tensor& gl = tp.grad_buffer(logits);
                    const float w = g[0] / static_cast<float>(count);
                    const std::size_t vocab2 = probs.cols();
                    for (std::size_t r = 0; r < probs.rows(); ++r) {
                      if (!msk[r]) continue;
                      float* dst = gl.data() + r * vocab2;
                      const float* pr = probs.data() + r * vocab2;
                      for (std::size_t c = 0; c < vocab2; ++c) dst[c] += w * pr[c];
                      dst[static_cast<std::size_t>(tgt[r])] -= w;
                    }
                  });
}

}  // namespace ag
}  // namespace prag::num
