#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "cqfuse/geometry.hpp"
#include "cqfuse/graph.hpp"
#include "cqfuse/nn.hpp"
#include "cqfuse/rng.hpp"

namespace cqf::heads {

// Axis-aligned detection volume. Centers are normalized to [0,1]^3
// against this range for regression targets and reference points.
struct Roi {
  Vec3 min_pt{-50, -50, -5};
  Vec3 max_pt{50, 50, 5};
};

struct Detection {
  BBox3D box;
  double score = 0.0;
  std::size_t class_id = 0;
};

// Two small MLPs over query features: an 8-parameter box regressor
// (center offset, log sizes, sin/cos yaw) and a per-class logit head.
struct HeadParams {
  nn::LinearParams reg1, reg2;  // d -> d -> 8
  nn::LinearParams cls1, cls2;  // d -> d -> classes
};

HeadParams init_head(Rng& rng, std::size_t d, std::size_t classes);

// Slot centers mapped into [0,1]^3, clamped so out-of-range slots stay
// usable as reference points.
Tensor normalize_refs(const Tensor& c_all, const Roi& roi);

// The 8 regression parameters of a ground-truth box (unclamped; callers
// supply boxes inside the roi).
std::array<double, 8> normalize_box_params(const BBox3D& box, const Roi& roi);

// Inverse of the parameterization: p8[0..2] absolute normalized center,
// p8[3..5] log sizes (clamped to +-8 before exp), p8[6..7] sin/cos yaw.
BBox3D decode_box8(const std::array<double, 8>& p8, const Roi& roi);

struct RawOutputs {
  Tensor reg;         // n x 8
  Tensor cls_logits;  // n x classes
};

RawOutputs head_raw(const Tensor& features, const HeadParams& p);

// Full decode: one detection per feature row; score is the max class
// probability.
std::vector<Detection> head_forward(const Tensor& features, const Tensor& refs,
                                    const HeadParams& p, const Roi& roi);

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col)
  double total_cost = 0.0;  // summed in ascending row order
};

// Exact min-cost assignment of size min(rows, cols), shortest augmenting
// path with potentials.
Assignment solve_assignment(const Tensor& cost);

// cost(i, j) = w_cls * (1 - p_i[class_j]) + w_box * L1(pred8_i, gt8_j)
Tensor match_cost(const Tensor& pred8, const Tensor& cls_logits,
                  std::span<const BBox3D> gts, std::span<const std::size_t> gt_classes,
                  const Roi& roi, double w_cls, double w_box);

Assignment hungarian_match(const Tensor& pred8, const Tensor& cls_logits,
                           std::span<const BBox3D> gts,
                           std::span<const std::size_t> gt_classes, const Roi& roi,
                           double w_cls = 1.0, double w_box = 1.0);

struct LossWeights {
  double w_sin = 1.0;
  double w_co = 1.0;
  double lambda_reg = 5.0;
  double w_cls = 1.0;  // matching only
  double w_box = 1.0;  // matching only
};

struct LayerTerm {
  double cls = 0.0;
  double reg = 0.0;
};

struct LossBreakdown {
  std::vector<LayerTerm> single_layers, coop_layers;
  double single_total = 0.0;  // sum over layers of cls + lambda_reg * reg
  double coop_total = 0.0;
  double total = 0.0;  // w_sin * single_total + w_co * coop_total
};

struct HeadNodes {
  ad::NodeId reg1_w, reg1_b, reg2_w, reg2_b;
  ad::NodeId cls1_w, cls1_b, cls2_w, cls2_b;
};

HeadNodes register_head(ad::Graph& g, const HeadParams& p);

// Builds one stage's deep-supervision loss on the tape: every layer is
// matched (Hungarian on the current values, or `frozen` when supplied so
// finite-difference probes keep the assignment constant) and contributes
// classification BCE plus lambda_reg-weighted L1 on matched boxes.
struct StageSupervision {
  ad::NodeId total;  // 1x1
  std::vector<LayerTerm> terms;
  std::vector<Assignment> assignments;
};

StageSupervision stage_loss_graph(ad::Graph& g, std::span<const ad::NodeId> layer_features,
                                  const Tensor& refs, const HeadNodes& head,
                                  std::span<const BBox3D> gts,
                                  std::span<const std::size_t> gt_classes,
                                  std::size_t classes, const Roi& roi, const LossWeights& w,
                                  std::span<const Assignment> frozen = {});

// Two-stage total over plain tensors (single pass, no gradients).
LossBreakdown supervised_loss(std::span<const Tensor> single_layers,
                              std::span<const Tensor> coop_layers, const Tensor& single_refs,
                              const Tensor& coop_refs, const HeadParams& sin_head,
                              const HeadParams& co_head, std::span<const BBox3D> gts,
                              std::span<const std::size_t> gt_classes, std::size_t classes,
                              const Roi& roi, const LossWeights& w);

}  // namespace cqf::heads
