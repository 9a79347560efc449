#include <cmath>
#include <functional>
#include <vector>

#include "prag/autograd.hpp"
#include "prag/error.hpp"
#include "prag/ops.hpp"
#include "prag/optim.hpp"
#include "unit/support.hpp"

using namespace prag::num;
using testing::random_tensor;

namespace {

// Plain double-precision reference implementations.
std::vector<double> ref_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += double(a.at(i, p)) * b.at(p, j);
  return c;
}

std::vector<double> ref_softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double z = 0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp(x[i] - mx);
  for (auto& v : out) v /= z;
  return out;
}

// Attention where row t of segment s attends to rows [start_s, t]; inputs are [T x d] row-major.
std::vector<double> ref_attention(const std::vector<double>& q, const std::vector<double>& k,
                                  const std::vector<double>& v, std::size_t d, std::size_t heads,
                                  const std::vector<std::size_t>& starts) {
  const std::size_t T = q.size() / d, dh = d / heads;
  std::vector<double> out(T * d, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t s0 = 0;
    for (auto s : starts)
      if (s <= t) s0 = s;
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> scores;
      for (std::size_t u = s0; u <= t; ++u) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[t * d + h * dh + c] * k[u * d + h * dh + c];
        scores.push_back(dot / std::sqrt(double(dh)));
      }
      auto p = ref_softmax(scores);
      for (std::size_t u = s0; u <= t; ++u)
        for (std::size_t c = 0; c < dh; ++c) out[t * d + h * dh + c] += p[u - s0] * v[u * d + h * dh + c];
    }
  }
  return out;
}

std::vector<double> doubles(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

void check_close(const Tensor& got, const std::vector<double>& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    INFO("element " << i);
    CHECK(std::abs(got[i] - want[i]) <= tol);
  }
}

}  // namespace

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  for (float x : t.values()) CHECK(x == 0.0f);
  CHECK_THROWS_AS(Tensor({2, 0}), prag::ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), prag::ShapeError);
  CHECK_THROWS_AS(Tensor::vector({1, 2}).rows(), prag::ShapeError);
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(m.at(1, 0) == 3.0f);
  CHECK(bitwise_equal(m, m));
  CHECK(max_abs_diff(m, Tensor::identity(2)) == doctest::Approx(3.0));
}

TEST_CASE("matmul variants agree with the triple loop") {
  auto a = random_tensor({5, 7}, 1);
  auto b = random_tensor({7, 3}, 2);
  check_close(matmul(a, b), ref_matmul(a, b), 1e-5);
  check_close(matmul_nt(a, transpose(b)), ref_matmul(a, b), 1e-5);
  check_close(matmul_tn(transpose(a), b), ref_matmul(a, b), 1e-5);
  CHECK_THROWS_AS(matmul(a, a), prag::ShapeError);
}

TEST_CASE("softmax rows sum to one and match the reference") {
  auto x = random_tensor({4, 9}, 3, 5.0f);
  auto y = softmax(x);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> row(x.row(r).begin(), x.row(r).end());
    auto want = ref_softmax(row);
    double total = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      CHECK(y.at(r, c) == doctest::Approx(want[c]).epsilon(1e-5));
      total += y.at(r, c);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  // Large logits must not overflow.
  auto big = Tensor::matrix({{1000.0f, 1000.0f, -1000.0f}});
  auto p = softmax(big);
  CHECK(p.at(0, 0) == doctest::Approx(0.5));
  CHECK(p.at(0, 2) == 0.0f);
}

TEST_CASE("softmax along axis 0") {
  auto x = random_tensor({3, 4}, 4);
  auto y = softmax(x, 0);
  for (std::size_t c = 0; c < 4; ++c) {
    double total = 0;
    for (std::size_t r = 0; r < 3; ++r) total += y.at(r, c);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer norm matches mean/variance reference") {
  auto x = random_tensor({3, 8}, 5, 3.0f);
  auto g = random_tensor({8}, 6);
  auto b = random_tensor({8}, 7);
  auto y = layer_norm(x, g, b);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += x.at(r, c);
    mean /= 8;
    for (std::size_t c = 0; c < 8; ++c) var += (x.at(r, c) - mean) * (x.at(r, c) - mean);
    var /= 8;
    for (std::size_t c = 0; c < 8; ++c) {
      double want = (x.at(r, c) - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
      CHECK(y.at(r, c) == doctest::Approx(want).epsilon(1e-4));
    }
  }
  CHECK_THROWS_AS(layer_norm(x, g, b, 0.0f), prag::ConfigError);
}

TEST_CASE("gelu tanh form") {
  for (double x : {-3.0, -1.0, 0.0, 0.5, 2.0}) {
    double want = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
    CHECK(gelu(float(x)) == doctest::Approx(want).epsilon(1e-6));
    double h = 1e-3;
    double slope = (gelu(float(x + h)) - gelu(float(x - h))) / (2 * h);
    CHECK(gelu_grad(float(x)) == doctest::Approx(slope).epsilon(1e-2));
  }
}

TEST_CASE("cross entropy over masked rows") {
  auto logits = random_tensor({4, 6}, 8);
  std::vector<std::int32_t> targets{1, 5, 0, 2};
  std::vector<std::uint8_t> mask{1, 0, 1, 1};
  double want = 0;
  for (std::size_t r : {0u, 2u, 3u}) {
    std::vector<double> row(logits.row(r).begin(), logits.row(r).end());
    want -= std::log(ref_softmax(row)[targets[r]]);
  }
  want /= 3;
  CHECK(cross_entropy_nll(logits, targets, mask) == doctest::Approx(want).epsilon(1e-5));
  std::vector<std::uint8_t> none(4, 0);
  CHECK_THROWS_AS(cross_entropy_nll(logits, targets, none), prag::ConfigError);
  std::vector<std::int32_t> bad{1, 5, 0, 9};
  CHECK_THROWS_AS(cross_entropy_nll(logits, bad, mask), prag::ConfigError);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  std::vector<float> v{0.1f, 3.0f, 3.0f, -1.0f};
  CHECK(argmax(v) == 1);
}

TEST_CASE("attention forward matches the reference") {
  auto q = random_tensor({7, 8}, 9);
  auto k = random_tensor({7, 8}, 10);
  auto v = random_tensor({7, 8}, 11);
  std::vector<std::size_t> starts{0, 3};
  Tape tape;
  auto out = ag::causal_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v), 2, starts);
  check_close(tape.value(out), ref_attention(doubles(q), doubles(k), doubles(v), 8, 2, starts), 1e-5);
}

TEST_CASE("attention is causal: later rows do not influence earlier ones") {
  auto q = random_tensor({5, 4}, 12);
  auto k = random_tensor({5, 4}, 13);
  auto v = random_tensor({5, 4}, 14);
  std::vector<std::size_t> starts{0};
  Tape t1;
  auto a = t1.value(ag::causal_attention(t1, t1.constant(q), t1.constant(k), t1.constant(v), 1, starts));
  for (std::size_t c = 0; c < 4; ++c) k.at(4, c) += 10.0f, v.at(4, c) -= 10.0f;
  Tape t2;
  auto b = t2.value(ag::causal_attention(t2, t2.constant(q), t2.constant(k), t2.constant(v), 1, starts));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(a.at(r, c) == b.at(r, c));
}

namespace {

using Vec = std::vector<double>;
using RefFn = std::function<Vec(const std::vector<Vec>&)>;

// Float tape gradients against central differences (h = 1e-3) of a double
// reference of the same op, projected to a scalar. Norm-wise relative error
// per input must stay below 1e-3.
void check_gradients_ref(const testing::GraphFn& f, const RefFn& ref, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.parameter(x));
  const Var out = f(tape, leaves);
  const Tensor proj = random_tensor(tape.value(out).shape(), 99);
  tape.backward(ag::sum(tape, ag::mul(tape, out, tape.constant(proj))));

  std::vector<Vec> x;
  for (const auto& t : inputs) x.push_back(doubles(t));
  auto projected = [&] {
    const Vec y = ref(x);
    REQUIRE(y.size() == proj.size());
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * proj[i];
    return s;
  };
  const double h = 1e-3;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor g = tape.grad(leaves[i]);
    double diff = 0, norm = 0;
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      const double saved = x[i][j];
      x[i][j] = saved + h;
      const double up = projected();
      x[i][j] = saved - h;
      const double down = projected();
      x[i][j] = saved;
      const double numeric = (up - down) / (2 * h);
      diff += (g[j] - numeric) * (g[j] - numeric);
      norm += numeric * numeric;
    }
    INFO("input " << i);
    REQUIRE(norm > 0);
    CHECK(std::sqrt(diff / norm) < 1e-3);
  }
}

Vec mm(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

Vec rows_softmax(const Vec& x, std::size_t cols) {
  Vec out;
  for (std::size_t r = 0; r < x.size() / cols; ++r) {
    auto p = ref_softmax(Vec(x.begin() + r * cols, x.begin() + (r + 1) * cols));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace

TEST_CASE("gradients of every differentiable op match double finite differences") {
  SUBCASE("matmul") {
    check_gradients_ref([](Tape& t, const std::vector<Var>& x) { return ag::matmul(t, x[0], x[1]); },
                        [](const std::vector<Vec>& x) { return mm(x[0], x[1], 3, 4, 2); },
                        {random_tensor({3, 4}, 1), random_tensor({4, 2}, 2)});
  }
  SUBCASE("matmul_nt") {
    check_gradients_ref(
        [](Tape& t, const std::vector<Var>& x) { return ag::matmul_nt(t, x[0], x[1]); },
        [](const std::vector<Vec>& x) {
          Vec bt(20);
          for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 4; ++j) bt[j * 5 + i] = x[1][i * 4 + j];
          return mm(x[0], bt, 3, 4, 5);
        },
        {random_tensor({3, 4}, 1), random_tensor({5, 4}, 2)});
  }
  SUBCASE("add, add_row, scale, mul") {
    check_gradients_ref(
        [](Tape& t, const std::vector<Var>& x) {
          auto s = ag::add(t, x[0], ag::scale(t, x[1], -0.5f));
          return ag::mul(t, ag::add_row(t, s, x[2]), x[0]);
        },
        [](const std::vector<Vec>& x) {
          Vec y(12);
          for (std::size_t i = 0; i < 12; ++i) y[i] = (x[0][i] - 0.5 * x[1][i] + x[2][i % 4]) * x[0][i];
          return y;
        },
        {random_tensor({3, 4}, 3), random_tensor({3, 4}, 4), random_tensor({4}, 5)});
  }
  SUBCASE("sum") {
    check_gradients_ref([](Tape& t, const std::vector<Var>& x) { return ag::sum(t, x[0]); },
                        [](const std::vector<Vec>& x) {
                          double s = 0;
                          for (double v : x[0]) s += v;
                          return Vec{s};
                        },
                        {random_tensor({2, 3}, 6)});
  }
  SUBCASE("gelu") {
    check_gradients_ref([](Tape& t, const std::vector<Var>& x) { return ag::gelu(t, x[0]); },
                        [](const std::vector<Vec>& x) {
                          Vec y;
                          for (double v : x[0])
                            y.push_back(0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v))));
                          return y;
                        },
                        {random_tensor({2, 5}, 6)});
  }
  SUBCASE("softmax_rows") {
    check_gradients_ref([](Tape& t, const std::vector<Var>& x) { return ag::softmax_rows(t, x[0]); },
                        [](const std::vector<Vec>& x) { return rows_softmax(x[0], 5); }, {random_tensor({3, 5}, 7)});
  }
  SUBCASE("layer_norm") {
    check_gradients_ref(
        [](Tape& t, const std::vector<Var>& x) { return ag::layer_norm(t, x[0], x[1], x[2]); },
        [](const std::vector<Vec>& x) {
          Vec y(18);
          for (std::size_t r = 0; r < 3; ++r) {
            double mean = 0, var = 0;
            for (std::size_t c = 0; c < 6; ++c) mean += x[0][r * 6 + c] / 6;
            for (std::size_t c = 0; c < 6; ++c) var += (x[0][r * 6 + c] - mean) * (x[0][r * 6 + c] - mean) / 6;
            for (std::size_t c = 0; c < 6; ++c)
              y[r * 6 + c] = (x[0][r * 6 + c] - mean) / std::sqrt(var + 1e-5) * x[1][c] + x[2][c];
          }
          return y;
        },
        {random_tensor({3, 6}, 8), random_tensor({6}, 9), random_tensor({6}, 10)});
  }
  SUBCASE("embedding with repeated ids") {
    std::vector<std::int32_t> ids{2, 0, 2, 3};
    check_gradients_ref([&](Tape& t, const std::vector<Var>& x) { return ag::embedding(t, x[0], ids); },
                        [&](const std::vector<Vec>& x) {
                          Vec y;
                          for (auto id : ids) y.insert(y.end(), x[0].begin() + id * 3, x[0].begin() + id * 3 + 3);
                          return y;
                        },
                        {random_tensor({4, 3}, 11)});
  }
  SUBCASE("cross_entropy") {
    std::vector<std::int32_t> targets{1, 0, 3};
    std::vector<std::uint8_t> mask{1, 0, 1};
    check_gradients_ref(
        [&](Tape& t, const std::vector<Var>& x) { return ag::cross_entropy(t, x[0], targets, mask); },
        [&](const std::vector<Vec>& x) {
          const auto p = rows_softmax(x[0], 4);
          return Vec{-(std::log(p[0 * 4 + 1]) + std::log(p[2 * 4 + 3])) / 2};
        },
        {random_tensor({3, 4}, 12)});
  }
  SUBCASE("causal_attention with two segments") {
    std::vector<std::size_t> starts{0, 2};
    check_gradients_ref(
        [&](Tape& t, const std::vector<Var>& x) { return ag::causal_attention(t, x[0], x[1], x[2], 2, starts); },
        [&](const std::vector<Vec>& x) {
          return ref_attention(x[0], x[1], x[2], 4, 2, starts);
        },
        {random_tensor({5, 4}, 13), random_tensor({5, 4}, 14), random_tensor({5, 4}, 15)});
  }
}

TEST_CASE("worked examples") {
  // matmul
  const auto m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(bitwise_equal(matmul(Tensor::identity(2), m), m));
  CHECK(bitwise_equal(matmul(m, Tensor::identity(2)), m));
  CHECK(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).at(0, 0) == 11.0f);
  const auto a = random_tensor({4, 5}, 31), b = random_tensor({5, 3}, 32);
  check_close(matmul(a, b), ref_matmul(a, b), 1e-6);

  // softmax
  const auto u = softmax(Tensor::matrix({{0, 0, 0}}));
  for (std::size_t c = 0; c < 3; ++c) CHECK(u.at(0, c) == doctest::Approx(1.0 / 3).epsilon(1e-7));
  const auto big = softmax(Tensor::matrix({{1000, 0}}));
  CHECK(big.at(0, 0) == 1.0f);
  CHECK(big.at(0, 1) == 0.0f);
  const auto s = softmax(Tensor::matrix({{1, 2, 3}}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(s.at(0, c) - std::exp(double(c + 1)) / z) < 1e-6);

  // layer norm
  const auto ones = Tensor::filled({3}, 1.0f), zeros = Tensor({3});
  const auto flat = layer_norm(Tensor::matrix({{5, 5, 5}}), ones, zeros);
  for (float x : flat.values()) CHECK(x == 0.0f);
  const auto pm = layer_norm(Tensor::matrix({{1, -1}}), Tensor::filled({2}, 1.0f), Tensor({2}), 1e-12f);
  CHECK(pm.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(pm.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));
  const auto row = layer_norm(random_tensor({1, 32}, 33, 4.0f), Tensor::filled({32}, 1.0f), Tensor({32}));
  double mean = 0, var = 0;
  for (float x : row.values()) mean += x / 32.0;
  for (float x : row.values()) var += (x - mean) * (x - mean) / 32.0;
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(var - 1.0) < 1e-5);

  // cross entropy
  const std::vector<std::uint8_t> all{1};
  CHECK(cross_entropy_nll(Tensor::matrix({{-50, 50, -50}}), std::vector<std::int32_t>{1}, all) < 1e-6f);
  CHECK(cross_entropy_nll(Tensor::matrix({{0.5f, 0.5f, 0.5f, 0.5f}}), std::vector<std::int32_t>{2}, all) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-7));
  const auto logits = random_tensor({3, 5}, 34);
  const std::vector<std::int32_t> targets{4, 0, 2};
  double want = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    const std::vector<double> lr(logits.row(r).begin(), logits.row(r).end());
    want -= std::log(ref_softmax(lr)[targets[r]]) / 3;
  }
  CHECK(std::abs(cross_entropy_nll(logits, targets, std::vector<std::uint8_t>{1, 1, 1}) - want) < 1e-6);

  // backward
  Tape tape;
  const auto x = tape.parameter_owned(Tensor::matrix({{3.0f}}));
  const auto unused = tape.parameter_owned(Tensor::matrix({{-2.0f}}));
  tape.backward(ag::sum(tape, ag::mul(tape, x, x)));
  CHECK(tape.grad(x)[0] == 6.0f);
  CHECK(tape.grad(unused)[0] == 0.0f);
}

TEST_CASE("softmax is invariant to a constant shift") {
  const auto x = random_tensor({5, 7}, 35, 3.0f);
  auto shifted = x;
  for (auto& v : shifted.values()) v += 12.5f;
  const auto p = softmax(x), q = softmax(shifted);
  for (std::size_t r = 0; r < 5; ++r) {
    CHECK(argmax(p.row(r)) == argmax(q.row(r)));
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      CHECK(std::abs(p.at(r, c) - q.at(r, c)) < 1e-6);
      total += p.at(r, c);
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("backward through a tiny two-layer MLP matches double finite differences") {
  // gelu(x W1 + b1) W2 with a sum-of-squares loss.
  const auto x = random_tensor({4, 3}, 40), w1 = random_tensor({3, 5}, 41), b1 = random_tensor({5}, 42),
             w2 = random_tensor({5, 2}, 43);
  auto graph = [&](Tape& t, const std::vector<Var>& p) {
    auto hdn = ag::gelu(t, ag::add_row(t, ag::matmul(t, t.constant(x), p[0]), p[1]));
    auto y = ag::matmul(t, hdn, p[2]);
    return ag::sum(t, ag::mul(t, y, y));
  };
  Tape tape;
  std::vector<Var> p{tape.parameter(w1), tape.parameter(b1), tape.parameter(w2)};
  tape.backward(graph(tape, p));

  std::vector<std::vector<double>> v{doubles(w1), doubles(b1), doubles(w2)};
  const auto xd = doubles(x);
  auto loss = [&] {
    double total = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      double hdn[5];
      for (std::size_t j = 0; j < 5; ++j) {
        double a = v[1][j];
        for (std::size_t k = 0; k < 3; ++k) a += xd[i * 3 + k] * v[0][k * 5 + j];
        hdn[j] = 0.5 * a * (1 + std::tanh(std::sqrt(2 / M_PI) * (a + 0.044715 * a * a * a)));
      }
      for (std::size_t o = 0; o < 2; ++o) {
        double y = 0;
        for (std::size_t j = 0; j < 5; ++j) y += hdn[j] * v[2][j * 2 + o];
        total += y * y;
      }
    }
    return total;
  };
  for (std::size_t i = 0; i < 3; ++i) {
    const auto g = tape.grad(p[i]);
    double diff = 0, norm = 0;
    for (std::size_t j = 0; j < v[i].size(); ++j) {
      const double saved = v[i][j];
      v[i][j] = saved + 1e-3;
      const double up = loss();
      v[i][j] = saved - 1e-3;
      const double down = loss();
      v[i][j] = saved;
      const double numeric = (up - down) / 2e-3;
      diff += (g[j] - numeric) * (g[j] - numeric);
      norm += numeric * numeric;
    }
    CHECK(std::sqrt(diff / norm) < 1e-3);
  }
}

TEST_CASE("constants receive no gradient and shared inputs accumulate") {
  Tape tape;
  auto w = tape.parameter_owned(Tensor::matrix({{2.0f}}));
  auto c = tape.constant(Tensor::matrix({{3.0f}}));
  auto y = ag::add(tape, ag::mul(tape, w, w), ag::mul(tape, w, c));  // w^2 + 3w
  tape.backward(ag::sum(tape, y));
  CHECK(tape.grad(w)[0] == doctest::Approx(7.0f));
  CHECK(tape.grad(c)[0] == 0.0f);
  CHECK_FALSE(tape.requires_grad(c));
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  auto w = tape.parameter_owned(Tensor::vector({1.0f, 2.0f}));
  CHECK_THROWS_AS(tape.backward(w), prag::ShapeError);
}

TEST_CASE("adam step matches a hand-rolled update") {
  Tensor p = Tensor::vector({1.0f, -2.0f});
  Tensor g = Tensor::vector({0.5f, -0.25f});
  AdamState state;
  AdamConfig cfg{.lr = 0.1f};
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int step = 1; step <= 3; ++step) {
    adam_step(ps, gs, state, cfg);
    for (int i = 0; i < 2; ++i) {
      double gi = g[i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(p[0] == doctest::Approx(ref[0]).epsilon(1e-5));
  CHECK(p[1] == doctest::Approx(ref[1]).epsilon(1e-5));
  CHECK(state.step == 3);
  Tensor wrong({3});
  const Tensor* bad[] = {&wrong};
  CHECK_THROWS_AS(adam_step(ps, bad, state, cfg), prag::ShapeError);
}

TEST_CASE("adam: zero gradient, first step, convex descent") {
  Tensor p = Tensor::vector({0.7f, -1.3f});
  const Tensor zero({2});
  AdamState state;
  Tensor* ps[] = {&p};
  const Tensor* zs[] = {&zero};
  adam_step(ps, zs, state, {.lr = 0.1f});
  CHECK(p[0] == 0.7f);
  CHECK(p[1] == -1.3f);

  // One step from fresh state: m_hat = g, v_hat = g^2, so theta' = theta - lr * g / (|g| + eps).
  Tensor q = Tensor::vector({2.0f});
  const Tensor g = Tensor::vector({-0.4f});
  AdamState fresh;
  Tensor* qs[] = {&q};
  const Tensor* gs[] = {&g};
  adam_step(qs, gs, fresh, {.lr = 0.01f});
  CHECK(q[0] == doctest::Approx(2.0 + 0.01 * 0.4 / (0.4 + 1e-8)).epsilon(1e-7));

  // f(w) = sum (w - c)^2 with lr small enough to avoid overshoot.
  Tensor w = Tensor::vector({3.0f, -4.0f, 0.5f});
  const std::vector<float> c{1.0f, 2.0f, -1.0f};
  AdamState st;
  Tensor* ws[] = {&w};
  auto f = [&] {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) s += (w[i] - c[i]) * (w[i] - c[i]);
    return s;
  };
  const double start = f();
  double prev = start;
  for (int step = 0; step < 200; ++step) {
    Tensor grad({3});
    for (std::size_t i = 0; i < 3; ++i) grad[i] = 2 * (w[i] - c[i]);
    const Tensor* gg[] = {&grad};
    adam_step(ws, gg, st, {.lr = 0.01f});
    const double now = f();
    if (step >= 5) CHECK(now <= prev + 1e-9);
    prev = now;
  }
  CHECK(prev < 0.5 * start);
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  Tensor a = Tensor::vector({3.0f, 0.0f});
  Tensor b = Tensor::vector({4.0f});
  Tensor* gs[] = {&a, &b};
  CHECK(clip_grad_norm(gs, 1.0f) == doctest::Approx(5.0f));
  CHECK(a[0] == doctest::Approx(0.6f));
  CHECK(b[0] == doctest::Approx(0.8f));
  CHECK(clip_grad_norm(gs, 10.0f) == doctest::Approx(1.0f));
  CHECK(a[0] == doctest::Approx(0.6f));
}

TEST_CASE("repeated runs are bitwise identical") {
  auto a = random_tensor({16, 32}, 21);
  auto b = random_tensor({32, 8}, 22);
  CHECK(bitwise_equal(matmul(a, b), matmul(a, b)));
}
