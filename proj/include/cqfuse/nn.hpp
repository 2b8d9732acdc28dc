#pragma once

#include <cstddef>
#include <span>

#include "cqfuse/rng.hpp"
#include "cqfuse/tensor.hpp"

namespace cqf::nn {

// Additive mask value for blocked attention pairs. Large enough that
// exp(kNegBlock + x) underflows to exactly +0.0 for any activation-scale x,
// which is what makes blocked keys contribute nothing bit-wise.
inline constexpr double kNegBlock = -1e9;

// Sequential sum with addends taken in ascending value order. Any two
// inputs that are permutations of each other produce bit-identical sums,
// which turns slot-permutation equivariance into an exact property.
double sorted_sum(std::span<const double> xs);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

struct LinearParams {
  Tensor weight;  // fan_out x fan_in
  Tensor bias;    // 1 x fan_out
};

// y = x W^T + b for row-major x of shape n x fan_in.
Tensor linear(const Tensor& x, const LinearParams& p);

struct LayerNormParams {
  Tensor gamma;  // 1 x d
  Tensor beta;   // 1 x d
  double epsilon = 1e-5;
};

// Row-wise normalization over the feature dimension (biased variance).
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

// Row softmax of (logits + mask). Mask entries must be 0 or kNegBlock;
// a fully blocked row throws std::invalid_argument. Denominators are
// accumulated in ascending value order.
Tensor softmax_masked(const Tensor& logits, const Tensor& additive_mask);

struct AttentionResult {
  Tensor weights;  // n x n row-stochastic
  Tensor output;   // n x d
};

// Single-head scaled dot-product attention with an additive mask.
// Both cross-slot reductions (softmax denominator and the weighted value
// sums) use ascending-value accumulation.
AttentionResult masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const Tensor& additive_mask);

// Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)), zero bias.
// Weights are drawn row-major.
LinearParams init_params(Rng& rng, std::size_t fan_in, std::size_t fan_out);

LayerNormParams init_layer_norm(std::size_t d, double epsilon = 1e-5);

}  // namespace cqf::nn
