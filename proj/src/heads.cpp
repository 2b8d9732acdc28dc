#include "cqfuse/heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cqf::heads {

namespace {

void check_roi(const Roi& roi) {
  if (!(roi.max_pt.x > roi.min_pt.x) || !(roi.max_pt.y > roi.min_pt.y) ||
      !(roi.max_pt.z > roi.min_pt.z))
    throw std::invalid_argument("roi: max must exceed min in every dimension");
}

constexpr double kLogSizeClamp = 8.0;

}  // namespace

HeadParams init_head(Rng& rng, std::size_t d, std::size_t classes) {
  HeadParams p;
  p.reg1 = nn::init_params(rng, d, d);
  p.reg2 = nn::init_params(rng, d, 8);
  p.cls1 = nn::init_params(rng, d, d);
  p.cls2 = nn::init_params(rng, d, classes);
  return p;
}

Tensor normalize_refs(const Tensor& c_all, const Roi& roi) {
  check_roi(roi);
  if (c_all.cols() != 3) throw std::invalid_argument("normalize_refs: centers must be n x 3");
  const double lo[3] = {roi.min_pt.x, roi.min_pt.y, roi.min_pt.z};
  const double hi[3] = {roi.max_pt.x, roi.max_pt.y, roi.max_pt.z};
  Tensor out(c_all.rows(), 3);
  for (std::size_t i = 0; i < c_all.rows(); ++i)
    for (int j = 0; j < 3; ++j)
      out(i, j) = std::clamp((c_all(i, j) - lo[j]) / (hi[j] - lo[j]), 0.0, 1.0);
  return out;
}

std::array<double, 8> normalize_box_params(const BBox3D& box, const Roi& roi) {
  check_roi(roi);
  return {(box.center.x - roi.min_pt.x) / (roi.max_pt.x - roi.min_pt.x),
          (box.center.y - roi.min_pt.y) / (roi.max_pt.y - roi.min_pt.y),
          (box.center.z - roi.min_pt.z) / (roi.max_pt.z - roi.min_pt.z),
          std::log(box.length),
          std::log(box.width),
          std::log(box.height),
          std::sin(box.yaw),
          std::cos(box.yaw)};
}

BBox3D decode_box8(const std::array<double, 8>& p8, const Roi& roi) {
  check_roi(roi);
  const Vec3 center{roi.min_pt.x + p8[0] * (roi.max_pt.x - roi.min_pt.x),
                    roi.min_pt.y + p8[1] * (roi.max_pt.y - roi.min_pt.y),
                    roi.min_pt.z + p8[2] * (roi.max_pt.z - roi.min_pt.z)};
  auto size = [](double logv) {
    return std::exp(std::clamp(logv, -kLogSizeClamp, kLogSizeClamp));
  };
  return BBox3D(center, size(p8[3]), size(p8[4]), size(p8[5]), std::atan2(p8[6], p8[7]));
}

RawOutputs head_raw(const Tensor& features, const HeadParams& p) {
  return {nn::linear(nn::relu(nn::linear(features, p.reg1)), p.reg2),
          nn::linear(nn::relu(nn::linear(features, p.cls1)), p.cls2)};
}

std::vector<Detection> head_forward(const Tensor& features, const Tensor& refs,
                                    const HeadParams& p, const Roi& roi) {
  if (refs.rows() != features.rows() || refs.cols() != 3)
    throw std::invalid_argument("head_forward: refs must be n x 3");
  const RawOutputs raw = head_raw(features, p);
  const Tensor probs = nn::sigmoid(raw.cls_logits);
  std::vector<Detection> out;
  out.reserve(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    std::array<double, 8> p8;
    for (int j = 0; j < 3; ++j) p8[j] = refs(i, j) + raw.reg(i, j);
    for (int j = 3; j < 8; ++j) p8[j] = raw.reg(i, j);
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.cols(); ++c)
      if (probs(i, c) > probs(i, best)) best = c;
    out.push_back({decode_box8(p8, roi), probs(i, best), best});
  }
  return out;
}

Assignment solve_assignment(const Tensor& cost) {
  const bool flip = cost.rows() > cost.cols();
  const std::size_t n = flip ? cost.cols() : cost.rows();  // n <= m
  const std::size_t m = flip ? cost.rows() : cost.cols();
  auto at = [&](std::size_t i, std::size_t j) { return flip ? cost(j, i) : cost(i, j); };

  Assignment result;
  if (n == 0) return result;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // shortest augmenting path with potentials, 1-indexed
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) {
      const std::size_t row = flip ? j - 1 : p[j] - 1;
      const std::size_t col = flip ? p[j] - 1 : j - 1;
      result.pairs.emplace_back(row, col);
    }
  std::sort(result.pairs.begin(), result.pairs.end());
  for (const auto& [r, c] : result.pairs) result.total_cost += cost(r, c);
  return result;
}

Tensor match_cost(const Tensor& pred8, const Tensor& cls_logits,
                  std::span<const BBox3D> gts, std::span<const std::size_t> gt_classes,
                  const Roi& roi, double w_cls, double w_box) {
  if (gts.size() != gt_classes.size())
    throw std::invalid_argument("match_cost: gts and classes disagree");
  const Tensor probs = nn::sigmoid(cls_logits);
  Tensor cost(pred8.rows(), gts.size());
  for (std::size_t j = 0; j < gts.size(); ++j) {
    if (gt_classes[j] >= probs.cols())
      throw std::invalid_argument("match_cost: class index out of range");
    const auto gt8 = normalize_box_params(gts[j], roi);
    for (std::size_t i = 0; i < pred8.rows(); ++i) {
      double l1 = 0.0;
      for (int t = 0; t < 8; ++t) l1 += std::abs(pred8(i, t) - gt8[t]);
      cost(i, j) = w_cls * (1.0 - probs(i, gt_classes[j])) + w_box * l1;
    }
  }
  return cost;
}

Assignment hungarian_match(const Tensor& pred8, const Tensor& cls_logits,
                           std::span<const BBox3D> gts,
                           std::span<const std::size_t> gt_classes, const Roi& roi,
                           double w_cls, double w_box) {
  return solve_assignment(match_cost(pred8, cls_logits, gts, gt_classes, roi, w_cls, w_box));
}

HeadNodes register_head(ad::Graph& g, const HeadParams& p) {
  return {g.param(p.reg1.weight), g.param(p.reg1.bias), g.param(p.reg2.weight),
          g.param(p.reg2.bias),   g.param(p.cls1.weight), g.param(p.cls1.bias),
          g.param(p.cls2.weight), g.param(p.cls2.bias)};
}

StageSupervision stage_loss_graph(ad::Graph& g, std::span<const ad::NodeId> layer_features,
                                  const Tensor& refs, const HeadNodes& head,
                                  std::span<const BBox3D> gts,
                                  std::span<const std::size_t> gt_classes,
                                  std::size_t classes, const Roi& roi, const LossWeights& w,
                                  std::span<const Assignment> frozen) {
  if (!frozen.empty() && frozen.size() != layer_features.size())
    throw std::invalid_argument("stage_loss_graph: frozen assignment count mismatch");

  StageSupervision out;
  const ad::NodeId refs_in = g.input(refs);
  ad::NodeId total = 0;
  bool have_total = false;

  for (std::size_t l = 0; l < layer_features.size(); ++l) {
    const ad::NodeId x = layer_features[l];
    const ad::NodeId reg =
        g.linear(g.relu(g.linear(x, head.reg1_w, head.reg1_b)), head.reg2_w, head.reg2_b);
    const ad::NodeId cls =
        g.linear(g.relu(g.linear(x, head.cls1_w, head.cls1_b)), head.cls2_w, head.cls2_b);
    const ad::NodeId pred8 =
        g.concat_cols(g.add(g.slice_cols(reg, 0, 3), refs_in), g.slice_cols(reg, 3, 5));

    const Assignment assign =
        frozen.empty()
            ? solve_assignment(match_cost(g.value(pred8), g.value(cls), gts, gt_classes, roi,
                                          w.w_cls, w.w_box))
            : frozen[l];

    const std::size_t n = g.value(x).rows();
    Tensor cls_target(n, classes);
    std::vector<std::size_t> rows;
    Tensor reg_target(assign.pairs.size(), 8);
    for (std::size_t t = 0; t < assign.pairs.size(); ++t) {
      const auto [slot, gt] = assign.pairs[t];
      cls_target(slot, gt_classes[gt]) = 1.0;
      rows.push_back(slot);
      const auto gt8 = normalize_box_params(gts[gt], roi);
      for (int j = 0; j < 8; ++j) reg_target(t, j) = gt8[j];
    }

    const ad::NodeId cls_loss = g.bce_with_logits_mean(cls, std::move(cls_target));
    const ad::NodeId reg_loss =
        g.l1_mean_rows(g.gather_rows(pred8, rows), std::move(reg_target));

    out.terms.push_back({g.value(cls_loss)(0, 0), g.value(reg_loss)(0, 0)});
    out.assignments.push_back(assign);

    const ad::NodeId layer = g.add(cls_loss, g.scale(reg_loss, w.lambda_reg));
    total = have_total ? g.add(total, layer) : layer;
    have_total = true;
  }

  if (!have_total) throw std::invalid_argument("stage_loss_graph: no layers");
  out.total = total;
  return out;
}

LossBreakdown supervised_loss(std::span<const Tensor> single_layers,
                              std::span<const Tensor> coop_layers, const Tensor& single_refs,
                              const Tensor& coop_refs, const HeadParams& sin_head,
                              const HeadParams& co_head, std::span<const BBox3D> gts,
                              std::span<const std::size_t> gt_classes, std::size_t classes,
                              const Roi& roi, const LossWeights& w) {
  ad::Graph g;
  std::vector<ad::NodeId> single_ids, coop_ids;
  for (const auto& t : single_layers) single_ids.push_back(g.input(t));
  for (const auto& t : coop_layers) coop_ids.push_back(g.input(t));

  const auto sin_nodes = register_head(g, sin_head);
  const auto co_nodes = register_head(g, co_head);
  const auto single =
      stage_loss_graph(g, single_ids, single_refs, sin_nodes, gts, gt_classes, classes, roi, w);
  const auto coop =
      stage_loss_graph(g, coop_ids, coop_refs, co_nodes, gts, gt_classes, classes, roi, w);
  const ad::NodeId total = g.add(g.scale(single.total, w.w_sin), g.scale(coop.total, w.w_co));

  LossBreakdown out;
  out.single_layers = single.terms;
  out.coop_layers = coop.terms;
  out.single_total = g.value(single.total)(0, 0);
  out.coop_total = g.value(coop.total)(0, 0);
  out.total = g.value(total)(0, 0);
  return out;
}

}  // namespace cqf::heads
