#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cqfuse/nn.hpp"
#include "cqfuse/rng.hpp"
#include "doctest.h"

using namespace cqf;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-scale, scale);
  return t;
}

// dot-product order oracle (impl accumulates in a different loop order)
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

}  // namespace

TEST_CASE("sorted_sum is permutation-stable") {
  Rng rng(41);
  std::vector<double> xs(64);
  for (auto& x : xs) x = rng.uniform(-3, 3);
  const double base = nn::sorted_sum(xs);
  for (int trial = 0; trial < 20; ++trial) {
    for (std::size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[rng.uniform_index(i)]);
    CHECK(nn::sorted_sum(xs) == base);
  }
  double plain = 0.0;
  for (double x : xs) plain += x;
  CHECK(base == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("matmul known values and oracle") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
  const Tensor c = nn::matmul(a, b);
  CHECK(c(0, 0) == 19.0);
  CHECK(c(0, 1) == 22.0);
  CHECK(c(1, 0) == 43.0);
  CHECK(c(1, 1) == 50.0);

  Rng rng(42);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = random_tensor(rng, 7, 5);
    const Tensor y = random_tensor(rng, 5, 9);
    const Tensor got = nn::matmul(x, y);
    const Tensor want = naive_matmul(x, y);
    for (std::size_t j = 0; j < got.size(); ++j)
      CHECK(got.data()[j] == doctest::Approx(want.data()[j]).epsilon(1e-12));
  }

  CHECK_THROWS_AS(nn::matmul(a, Tensor(3, 3)), std::invalid_argument);
}

TEST_CASE("transpose") {
  const Tensor a = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Tensor t = nn::transpose(a);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 2);
  CHECK(t(2, 1) == 6.0);
  CHECK(t(0, 1) == 4.0);
}

TEST_CASE("relu and sigmoid") {
  const Tensor x = Tensor::from_rows({{-2, 0, 3}});
  const Tensor r = nn::relu(x);
  CHECK(r(0, 0) == 0.0);
  CHECK(r(0, 1) == 0.0);
  CHECK(r(0, 2) == 3.0);

  const Tensor s = nn::sigmoid(x);
  CHECK(s(0, 1) == doctest::Approx(0.5));
  CHECK(s(0, 2) == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))));
  // stable for large magnitudes, and sigma(-x) == 1 - sigma(x)
  const Tensor big = Tensor::from_rows({{-800, 800}});
  const Tensor sb = nn::sigmoid(big);
  CHECK(sb(0, 0) == 0.0);
  CHECK(sb(0, 1) == 1.0);
  Rng rng(43);
  for (int i = 0; i < 50; ++i) {
    const double v = rng.uniform(-20, 20);
    const Tensor pair = Tensor::from_rows({{v, -v}});
    const Tensor sp = nn::sigmoid(pair);
    CHECK(sp(0, 0) + sp(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("linear known case") {
  const Tensor x = Tensor::from_rows({{1, 2}});
  nn::LinearParams p;
  p.weight = Tensor::from_rows({{1, 0}, {0, 1}, {1, 1}});
  p.bias = Tensor::from_rows({{0.5, -0.5, 0}});
  const Tensor y = nn::linear(x, p);
  CHECK(y(0, 0) == 1.5);
  CHECK(y(0, 1) == 1.5);
  CHECK(y(0, 2) == 3.0);
  CHECK_THROWS_AS(nn::linear(Tensor(1, 3), p), std::invalid_argument);
}

TEST_CASE("layer_norm against the closed form") {
  nn::LayerNormParams p = nn::init_layer_norm(4);
  const Tensor x = Tensor::from_rows({{1, 2, 3, 4}});
  const Tensor y = nn::layer_norm(x, p);
  const double mu = 2.5, var = 1.25;
  for (int j = 0; j < 4; ++j)
    CHECK(y(0, j) == doctest::Approx((x(0, j) - mu) / std::sqrt(var + 1e-5)).epsilon(1e-12));

  // affine parameters apply after normalization
  p.gamma = Tensor::from_rows({{2, 2, 2, 2}});
  p.beta = Tensor::from_rows({{1, 1, 1, 1}});
  const Tensor y2 = nn::layer_norm(x, p);
  for (int j = 0; j < 4; ++j) CHECK(y2(0, j) == doctest::Approx(2 * y(0, j) + 1).epsilon(1e-12));

  // normalized rows: mean ~ 0, var ~ 1
  Rng rng(44);
  const Tensor z = random_tensor(rng, 6, 16, 5.0);
  const Tensor n = nn::layer_norm(z, nn::init_layer_norm(16));
  for (std::size_t i = 0; i < n.rows(); ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < n.cols(); ++j) m += n(i, j);
    m /= 16.0;
    for (std::size_t j = 0; j < n.cols(); ++j) v += (n(i, j) - m) * (n(i, j) - m);
    v /= 16.0;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("softmax_masked matches the exp formula") {
  Rng rng(45);
  const Tensor logits = random_tensor(rng, 5, 7, 3.0);
  Tensor mask(5, 7);
  for (std::size_t i = 0; i < mask.rows(); ++i)
    for (std::size_t j = 0; j < mask.cols(); ++j)
      if (rng.uniform() < 0.3 && j != i) mask(i, j) = nn::kNegBlock;

  const Tensor w = nn::softmax_masked(logits, mask);
  for (std::size_t i = 0; i < 5; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < 7; ++j)
      if (mask(i, j) == 0.0) denom += std::exp(logits(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      if (mask(i, j) == 0.0)
        CHECK(w(i, j) == doctest::Approx(std::exp(logits(i, j)) / denom).epsilon(1e-12));
      else
        CHECK(w(i, j) == 0.0);  // exact: exp underflows
      sum += w(i, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax_masked rejects a fully blocked row") {
  const Tensor logits(2, 3);
  Tensor mask(2, 3);
  for (std::size_t j = 0; j < 3; ++j) mask(1, j) = nn::kNegBlock;
  CHECK_THROWS_AS(nn::softmax_masked(logits, mask), std::invalid_argument);
}

TEST_CASE("softmax_masked shift invariance per row") {
  Rng rng(46);
  const Tensor logits = random_tensor(rng, 3, 6, 2.0);
  Tensor shifted = logits;
  for (std::size_t j = 0; j < 6; ++j) shifted(1, j) += 37.5;
  const Tensor mask(3, 6);
  const Tensor a = nn::softmax_masked(logits, mask);
  const Tensor b = nn::softmax_masked(shifted, mask);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
}

TEST_CASE("masked_attention against a naive implementation") {
  Rng rng(47);
  const std::size_t n = 6, d = 8;
  const Tensor q = random_tensor(rng, n, d);
  const Tensor k = random_tensor(rng, n, d);
  const Tensor v = random_tensor(rng, n, d);
  Tensor mask(n, n);
  mask(0, 3) = nn::kNegBlock;
  mask(2, 1) = nn::kNegBlock;
  mask(4, 4) = 0.0;

  const auto res = nn::masked_attention(q, k, v, mask);

  // independent recomputation
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(n);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q(i, t) * k(j, t);
      z[j] = s / std::sqrt(static_cast<double>(d)) + mask(i, j);
    }
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (double x : z) denom += std::exp(x - zmax);
    for (std::size_t t = 0; t < d; ++t) {
      double o = 0.0;
      for (std::size_t j = 0; j < n; ++j) o += std::exp(z[j] - zmax) / denom * v(j, t);
      CHECK(res.output(i, t) == doctest::Approx(o).epsilon(1e-12));
    }
  }

  // row-stochastic weights
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += res.weights(i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("masked_attention: a blocked key has exactly zero influence") {
  Rng rng(48);
  const std::size_t n = 5, d = 4;
  const Tensor q = random_tensor(rng, n, d);
  const Tensor k = random_tensor(rng, n, d);
  Tensor v = random_tensor(rng, n, d);
  Tensor mask(n, n);
  for (std::size_t i = 0; i < n; ++i) mask(i, 2) = nn::kNegBlock;  // key 2 blocked everywhere

  const Tensor base = nn::masked_attention(q, k, v, mask).output;
  for (std::size_t t = 0; t < d; ++t) v(2, t) = rng.uniform(-100, 100);
  const Tensor mutated = nn::masked_attention(q, k, v, mask).output;
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(base.data()[i] == mutated.data()[i]);  // bit-exact
}

TEST_CASE("init_params bounds and determinism") {
  Rng a(49), b(49);
  const auto p = nn::init_params(a, 16, 32);
  const auto q = nn::init_params(b, 16, 32);
  CHECK(p.weight.rows() == 32);
  CHECK(p.weight.cols() == 16);
  CHECK(p.bias.cols() == 32);
  const double s = std::sqrt(6.0 / 48.0);
  for (std::size_t i = 0; i < p.weight.size(); ++i) {
    CHECK(std::abs(p.weight.data()[i]) <= s);
    CHECK(p.weight.data()[i] == q.weight.data()[i]);
  }
  for (std::size_t i = 0; i < p.bias.size(); ++i) CHECK(p.bias.data()[i] == 0.0);
}
