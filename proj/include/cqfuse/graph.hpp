#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cqfuse/nn.hpp"
#include "cqfuse/tensor.hpp"

namespace cqf::ad {

using NodeId = std::size_t;

// Define-by-run reverse-mode tape over Tensor values. Forward values are
// computed eagerly with the cqf::nn kernels, so a graph evaluation is
// bit-identical to the plain Tensor code path. Graphs are single-use:
// build, read values, call backward once.
class Graph {
 public:
  NodeId input(Tensor v);  // constant leaf
  NodeId param(Tensor v);  // leaf that receives gradient

  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId relu(NodeId a);
  NodeId linear(NodeId x, NodeId weight, NodeId bias);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double epsilon = 1e-5);
  // y(i,:) = gamma(0,:) * x(i,:) + beta(0,:)
  NodeId row_affine(NodeId x, NodeId gamma, NodeId beta);
  NodeId softmax_masked(NodeId logits, Tensor additive_mask);
  // scaled dot-product attention with constant additive mask
  NodeId attention_core(NodeId q, NodeId k, NodeId v, Tensor additive_mask);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId slice_rows(NodeId a, std::size_t r0, std::size_t n);
  NodeId slice_cols(NodeId a, std::size_t c0, std::size_t n);
  // out row i = a row idx[i]; repeated indices accumulate on backward
  NodeId gather_rows(NodeId a, std::vector<std::size_t> idx);
  NodeId sum(NodeId a);                         // 1x1
  NodeId weighted_sum(NodeId a, Tensor w);      // 1x1 dot with constant
  // mean over all entries of max(z,0) - z*t + log(1+exp(-|z|))
  NodeId bce_with_logits_mean(NodeId logits, Tensor targets);
  // mean over rows of the row-sum of |pred - target|; 0 for empty pred
  NodeId l1_mean_rows(NodeId pred, Tensor target);

  void backward(NodeId loss);  // loss must be 1x1

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Graph&)> back;  // may be empty (leaf)
  };

  NodeId emplace(Tensor value, std::function<void(Graph&)> back);
  Tensor& grad_ref(NodeId id) { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

// Named parameter gradients vs central finite differences of a scalar
// function. The tensors in `params` are perturbed in place through the
// pointers and restored afterwards; `eval` must be a deterministic pure
// function of them.
struct FdEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_diff = 0.0;
  std::size_t worst_index = 0;
};

struct FdReport {
  std::vector<FdEntry> entries;
  double worst_rel_err = 0.0;
  std::string worst_name;
  bool passed(double tol) const { return worst_rel_err < tol; }
};

// rel err per coordinate: |a - fd| / max(|a|, |fd|, 1e-4); the floor keeps
// exactly-zero gradients from dividing by FD noise.
FdReport finite_diff_check(std::span<const std::pair<std::string, Tensor*>> params,
                           const std::function<double()>& eval,
                           const std::map<std::string, Tensor>& analytic,
                           double h = 1e-6);

}  // namespace cqf::ad
