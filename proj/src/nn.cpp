#include "cqfuse/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace cqf::nn {

double sorted_sum(std::span<const double> xs) {
  std::vector<double> buf(xs.begin(), xs.end());
  std::sort(buf.begin(), buf.end());
  double s = 0.0;
  for (double v : buf) s += v;
  return s;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dims " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::max(0.0, x.data()[i]);
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                             : std::exp(v) / (1.0 + std::exp(v));
  }
  return out;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  if (x.cols() != p.weight.cols())
    throw std::invalid_argument("linear: input dim " + x.shape_str() +
                                " does not match weight " + p.weight.shape_str());
  const std::size_t n = x.rows(), out_d = p.weight.rows();
  Tensor out(n, out_d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out_d; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j) * p.weight(o, j);
      out(i, o) = s + p.bias(0, o);
    }
  return out;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  if (x.cols() != p.gamma.cols())
    throw std::invalid_argument("layer_norm: feature dim mismatch");
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + p.epsilon);
    for (std::size_t j = 0; j < d; ++j)
      out(i, j) = p.gamma(0, j) * ((x(i, j) - mu) * inv) + p.beta(0, j);
  }
  return out;
}

Tensor softmax_masked(const Tensor& logits, const Tensor& additive_mask) {
  check_same_shape(logits, additive_mask, "softmax_masked");
  const std::size_t n = logits.rows(), m = logits.cols();
  Tensor out(n, m);
  std::vector<double> e(m);
  for (std::size_t i = 0; i < n; ++i) {
    bool any_open = false;
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (additive_mask(i, j) != kNegBlock) any_open = true;
      zmax = std::max(zmax, logits(i, j) + additive_mask(i, j));
    }
    if (!any_open) throw std::invalid_argument("softmax_masked: fully blocked row");
    for (std::size_t j = 0; j < m; ++j)
      e[j] = std::exp(logits(i, j) + additive_mask(i, j) - zmax);
    const double denom = sorted_sum(e);
    for (std::size_t j = 0; j < m; ++j) out(i, j) = e[j] / denom;
  }
  return out;
}

AttentionResult masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const Tensor& additive_mask) {
  if (q.cols() != k.cols() || k.rows() != v.rows())
    throw std::invalid_argument("masked_attention: shape mismatch");
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols(), dv = v.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor logits(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q(i, t) * k(j, t);
      logits(i, j) = s * scale;
    }
  Tensor w = softmax_masked(logits, additive_mask);
  Tensor out(n, dv);
  std::vector<double> terms(m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < dv; ++t) {
      for (std::size_t j = 0; j < m; ++j) terms[j] = w(i, j) * v(j, t);
      out(i, t) = sorted_sum(terms);
    }
  return {std::move(w), std::move(out)};
}

LinearParams init_params(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  LinearParams p{Tensor(fan_out, fan_in), Tensor(1, fan_out)};
  for (std::size_t i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.uniform(-s, s);
  return p;
}

LayerNormParams init_layer_norm(std::size_t d, double epsilon) {
  LayerNormParams p{Tensor::full(1, d, 1.0), Tensor(1, d), epsilon};
  return p;
}

}  // namespace cqf::nn
