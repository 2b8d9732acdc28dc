#include "cqfuse/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace cqf::fusion {

namespace {

Tensor to_tensor(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<double>(v[i]);
  return t;
}

void check_payload_dims(const wire::QueryPayload& ego,
                        std::span<const wire::QueryPayload> cavs, std::size_t max_agents) {
  if (1 + cavs.size() > max_agents)
    throw std::invalid_argument("align_and_concat: more agents than max_agents");
  // Agent blocks are sized by the ego payload; a CAV may transmit fewer
  // queries (its block's tail stays invalid) but never more.
  for (const auto& p : cavs)
    if (p.k > ego.k || p.d != ego.d || p.c != ego.c)
      throw std::invalid_argument("align_and_concat: payload dims disagree");
}

Transform cav_relative(const wire::QueryPayload& cav, const Pose& ego_pose) {
  return compose(invert(Transform::from_pose(ego_pose)), cav.pose_transform());
}

// Fills centers/scores/validity for one agent block.
void fill_meta(AlignedBatch& b, std::size_t block, const wire::QueryPayload& p,
               const Transform& relative, bool is_ego) {
  const std::size_t base = block * b.k;
  for (std::size_t i = 0; i < p.k; ++i) {
    Vec3 cpt{static_cast<double>(p.centers[i * 3 + 0]),
             static_cast<double>(p.centers[i * 3 + 1]),
             static_cast<double>(p.centers[i * 3 + 2])};
    if (!is_ego) cpt = transform_point(relative, cpt);
    b.c_all(base + i, 0) = cpt.x;
    b.c_all(base + i, 1) = cpt.y;
    b.c_all(base + i, 2) = cpt.z;
    for (std::size_t j = 0; j < b.c; ++j)
      b.s_all(base + i, j) = static_cast<double>(p.scores[i * b.c + j]);
    b.valid[base + i] = 1;
    b.slot_agent[base + i] = static_cast<std::int32_t>(block);
  }
}

}  // namespace

Tensor flatten_transform(const Transform& t) {
  Tensor out(1, 16);
  for (int i = 0; i < 16; ++i) out(0, i) = t.flat()[i];
  return out;
}

MlnParams init_mln(Rng& rng, std::size_t d, std::size_t hidden) {
  MlnParams p;
  p.enc1 = nn::init_params(rng, 16, hidden);
  // identity start: zero weight, bias [1...1, 0...0] => gamma 1, beta 0
  p.enc2 = nn::LinearParams{Tensor(2 * d, hidden), Tensor(1, 2 * d)};
  for (std::size_t j = 0; j < d; ++j) p.enc2.bias(0, j) = 1.0;
  p.norm = nn::init_layer_norm(d);
  p.pos = Tensor(3, d);
  const double ps = std::sqrt(6.0 / static_cast<double>(3 + d));
  for (std::size_t i = 0; i < p.pos.size(); ++i) p.pos.data()[i] = rng.uniform(-ps, ps);
  return p;
}

MhsaParams init_mhsa(Rng& rng, std::size_t d, std::size_t heads) {
  if (heads == 0 || d % heads != 0)
    throw std::invalid_argument("init_mhsa: heads must divide d");
  MhsaParams p;
  p.wq = nn::init_params(rng, d, d);
  p.wk = nn::init_params(rng, d, d);
  p.wv = nn::init_params(rng, d, d);
  p.wo = nn::init_params(rng, d, d);
  p.heads = heads;
  return p;
}

EqFormerParams init_eqformer(Rng& rng, std::size_t d, std::size_t heads, std::size_t ffn_dim,
                             std::size_t blocks) {
  EqFormerParams p;
  for (std::size_t b = 0; b < blocks; ++b) {
    BlockParams blk;
    blk.attn = init_mhsa(rng, d, heads);
    blk.ln1 = nn::init_layer_norm(d);
    blk.ln2 = nn::init_layer_norm(d);
    blk.ffn1 = nn::init_params(rng, d, ffn_dim);
    blk.ffn2 = nn::init_params(rng, ffn_dim, d);
    p.blocks.push_back(std::move(blk));
  }
  return p;
}

Tensor mln_align(const Tensor& q, const Transform& relative, const MlnParams& p) {
  const std::size_t d = q.cols();
  const Tensor normed = nn::layer_norm(q, p.norm);
  const Tensor enc = nn::relu(nn::linear(flatten_transform(relative), p.enc1));
  const Tensor gb = nn::linear(enc, p.enc2);  // 1 x 2d
  Tensor out(q.rows(), d);
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      out(i, j) = gb(0, j) * normed(i, j) + gb(0, d + j);
  return out;
}

namespace {

// Invalid slots go through a row of zeros, so the bias-free projection
// returns an exact zero row for them.
Tensor gate_refs(const Tensor& refs, const std::vector<std::uint8_t>& valid) {
  if (refs.rows() != valid.size())
    throw std::invalid_argument("encode_centers: refs/valid size mismatch");
  Tensor gated = refs;
  for (std::size_t i = 0; i < gated.rows(); ++i)
    if (!valid[i])
      for (std::size_t j = 0; j < gated.cols(); ++j) gated(i, j) = 0.0;
  return gated;
}

}  // namespace

Tensor encode_centers(const Tensor& refs, const std::vector<std::uint8_t>& valid,
                      const Tensor& pos) {
  return nn::matmul(gate_refs(refs, valid), pos);
}

AlignedBatch align_and_concat(const wire::QueryPayload& ego,
                              std::span<const wire::QueryPayload> cavs, const Pose& ego_pose,
                              std::size_t max_agents, const MlnParams& mln) {
  check_payload_dims(ego, cavs, max_agents);
  AlignedBatch b;
  b.k = ego.k;
  b.d = ego.d;
  b.c = ego.c;
  const std::size_t slots = max_agents * b.k;
  b.q_all = Tensor(slots, b.d);
  b.c_all = Tensor(slots, 3);
  b.s_all = Tensor(slots, b.c);
  b.valid.assign(slots, 0);
  b.slot_agent.assign(slots, -1);

  auto place = [&](std::size_t block, const wire::QueryPayload& p, const Transform& rel,
                   bool is_ego) {
    const Tensor aligned = mln_align(to_tensor(p.features, p.k, p.d), rel, mln);
    for (std::size_t i = 0; i < p.k; ++i)
      for (std::size_t j = 0; j < b.d; ++j) b.q_all(block * b.k + i, j) = aligned(i, j);
    fill_meta(b, block, p, rel, is_ego);
  };

  place(0, ego, Transform(), true);
  for (std::size_t a = 0; a < cavs.size(); ++a)
    place(a + 1, cavs[a], cav_relative(cavs[a], ego_pose), false);
  return b;
}

AttnMask build_qsm(const std::vector<std::uint8_t>& valid) {
  const std::size_t n = valid.size();
  AttnMask m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m.set_blocked(i, j, !(valid[i] && valid[j]));
  return m;
}

AttnMask build_pcm(const Tensor& c_all, double tau) {
  const std::size_t n = c_all.rows();
  const double tau2 = tau * tau;
  AttnMask m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = c_all(i, 0) - c_all(j, 0);
      const double dy = c_all(i, 1) - c_all(j, 1);
      const double dz = c_all(i, 2) - c_all(j, 2);
      m.set_blocked(i, j, dx * dx + dy * dy + dz * dz > tau2);
    }
  return m;
}

AttnMask build_ssm(const Tensor& s_all, double theta) {
  const std::size_t n = s_all.rows();
  std::vector<bool> pass(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = s_all(i, 0);
    for (std::size_t c = 1; c < s_all.cols(); ++c) best = std::max(best, s_all(i, c));
    pass[i] = best > theta;
  }
  AttnMask m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m.set_blocked(i, j, !(pass[i] && pass[j]));
  return m;
}

AttnMask combine_masks(const AttnMask& qsm, const AttnMask& pcm, const AttnMask& ssm) {
  if (qsm.n != pcm.n || qsm.n != ssm.n)
    throw std::invalid_argument("combine_masks: size mismatch");
  AttnMask m(qsm.n);
  for (std::size_t i = 0; i < m.blocked.size(); ++i)
    m.blocked[i] = qsm.blocked[i] | pcm.blocked[i] | ssm.blocked[i];
  for (std::size_t i = 0; i < m.n; ++i) m.set_blocked(i, i, false);
  return m;
}

AttnMask build_combined(const AlignedBatch& batch, const MaskConfig& cfg) {
  const std::size_t n = batch.slots();
  const AttnMask qsm = cfg.use_qsm ? build_qsm(batch.valid) : AttnMask(n);
  const AttnMask pcm = cfg.use_pcm ? build_pcm(batch.c_all, cfg.tau) : AttnMask(n);
  const AttnMask ssm = cfg.use_ssm ? build_ssm(batch.s_all, cfg.theta) : AttnMask(n);
  return combine_masks(qsm, pcm, ssm);
}

Tensor to_additive(const AttnMask& mask) {
  Tensor t(mask.n, mask.n);
  for (std::size_t i = 0; i < mask.blocked.size(); ++i)
    t.data()[i] = mask.blocked[i] ? nn::kNegBlock : 0.0;
  return t;
}

Tensor masked_mhsa(const Tensor& x, const Tensor& additive_mask, const MhsaParams& p) {
  const std::size_t d = x.cols();
  if (d % p.heads != 0) throw std::invalid_argument("masked_mhsa: heads must divide d");
  const std::size_t dh = d / p.heads;
  const Tensor qf = nn::linear(x, p.wq);
  const Tensor kf = nn::linear(x, p.wk);
  const Tensor vf = nn::linear(x, p.wv);

  Tensor cat(x.rows(), d);
  auto slice = [](const Tensor& t, std::size_t c0, std::size_t w) {
    Tensor out(t.rows(), w);
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < w; ++j) out(i, j) = t(i, c0 + j);
    return out;
  };
  for (std::size_t h = 0; h < p.heads; ++h) {
    const auto res = nn::masked_attention(slice(qf, h * dh, dh), slice(kf, h * dh, dh),
                                          slice(vf, h * dh, dh), additive_mask);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < dh; ++j) cat(i, h * dh + j) = res.output(i, j);
  }
  return nn::linear(cat, p.wo);
}

std::vector<Tensor> eqformer_forward(const AlignedBatch& batch, const MaskConfig& cfg,
                                     const EqFormerParams& p) {
  const Tensor additive = to_additive(build_combined(batch, cfg));
  Tensor x = batch.q_all;
  std::vector<Tensor> outputs;
  outputs.reserve(p.blocks.size());
  for (const auto& blk : p.blocks) {
    x = nn::layer_norm(nn::add(x, masked_mhsa(x, additive, blk.attn)), blk.ln1);
    x = nn::layer_norm(nn::add(x, nn::linear(nn::relu(nn::linear(x, blk.ffn1)), blk.ffn2)),
                       blk.ln2);
    outputs.push_back(x);
  }
  return outputs;
}

MlnNodes register_mln(ad::Graph& g, const MlnParams& p) {
  return {g.param(p.enc1.weight), g.param(p.enc1.bias), g.param(p.enc2.weight),
          g.param(p.enc2.bias),   g.param(p.norm.gamma), g.param(p.norm.beta),
          g.param(p.pos),         p.norm.epsilon};
}

MhsaNodes register_mhsa(ad::Graph& g, const MhsaParams& p) {
  return {g.param(p.wq.weight), g.param(p.wq.bias), g.param(p.wk.weight), g.param(p.wk.bias),
          g.param(p.wv.weight), g.param(p.wv.bias), g.param(p.wo.weight), g.param(p.wo.bias),
          p.heads};
}

std::vector<BlockNodes> register_eqformer(ad::Graph& g, const EqFormerParams& p) {
  std::vector<BlockNodes> out;
  for (const auto& blk : p.blocks) {
    BlockNodes n;
    n.attn = register_mhsa(g, blk.attn);
    n.ln1_g = g.param(blk.ln1.gamma);
    n.ln1_b = g.param(blk.ln1.beta);
    n.ln2_g = g.param(blk.ln2.gamma);
    n.ln2_b = g.param(blk.ln2.beta);
    n.ffn1_w = g.param(blk.ffn1.weight);
    n.ffn1_b = g.param(blk.ffn1.bias);
    n.ffn2_w = g.param(blk.ffn2.weight);
    n.ffn2_b = g.param(blk.ffn2.bias);
    n.eps1 = blk.ln1.epsilon;
    n.eps2 = blk.ln2.epsilon;
    out.push_back(n);
  }
  return out;
}

ad::NodeId mln_align_graph(ad::Graph& g, ad::NodeId q, const Transform& relative,
                           const MlnNodes& p) {
  const std::size_t d = g.value(q).cols();
  const auto normed = g.layer_norm(q, p.gamma, p.beta, p.epsilon);
  const auto flat = g.input(flatten_transform(relative));
  const auto enc = g.relu(g.linear(flat, p.enc1_w, p.enc1_b));
  const auto gb = g.linear(enc, p.enc2_w, p.enc2_b);
  return g.row_affine(normed, g.slice_cols(gb, 0, d), g.slice_cols(gb, d, d));
}

ad::NodeId encode_centers_graph(ad::Graph& g, const Tensor& refs,
                                const std::vector<std::uint8_t>& valid, ad::NodeId pos) {
  return g.matmul(g.input(gate_refs(refs, valid)), pos);
}

ad::NodeId masked_mhsa_graph(ad::Graph& g, ad::NodeId x, const Tensor& additive_mask,
                             const MhsaNodes& p) {
  const std::size_t d = g.value(x).cols();
  if (d % p.heads != 0) throw std::invalid_argument("masked_mhsa_graph: heads must divide d");
  const std::size_t dh = d / p.heads;
  const auto qf = g.linear(x, p.wq_w, p.wq_b);
  const auto kf = g.linear(x, p.wk_w, p.wk_b);
  const auto vf = g.linear(x, p.wv_w, p.wv_b);
  ad::NodeId cat = 0;
  for (std::size_t h = 0; h < p.heads; ++h) {
    const auto head =
        g.attention_core(g.slice_cols(qf, h * dh, dh), g.slice_cols(kf, h * dh, dh),
                         g.slice_cols(vf, h * dh, dh), additive_mask);
    cat = h == 0 ? head : g.concat_cols(cat, head);
  }
  return g.linear(cat, p.wo_w, p.wo_b);
}

std::vector<ad::NodeId> eqformer_graph(ad::Graph& g, ad::NodeId q_all,
                                       const Tensor& additive_mask,
                                       std::span<const BlockNodes> blocks) {
  ad::NodeId x = q_all;
  std::vector<ad::NodeId> outputs;
  for (const auto& blk : blocks) {
    x = g.layer_norm(g.add(x, masked_mhsa_graph(g, x, additive_mask, blk.attn)), blk.ln1_g,
                     blk.ln1_b, blk.eps1);
    const auto ffn = g.linear(g.relu(g.linear(x, blk.ffn1_w, blk.ffn1_b)), blk.ffn2_w,
                              blk.ffn2_b);
    x = g.layer_norm(g.add(x, ffn), blk.ln2_g, blk.ln2_b, blk.eps2);
    outputs.push_back(x);
  }
  return outputs;
}

AlignedGraph align_and_concat_graph(ad::Graph& g, const wire::QueryPayload& ego,
                                    std::span<const wire::QueryPayload> cavs,
                                    const Pose& ego_pose, std::size_t max_agents,
                                    const MlnNodes& mln) {
  check_payload_dims(ego, cavs, max_agents);
  AlignedGraph out;
  AlignedBatch& b = out.meta;
  b.k = ego.k;
  b.d = ego.d;
  b.c = ego.c;
  const std::size_t slots = max_agents * b.k;
  b.c_all = Tensor(slots, 3);
  b.s_all = Tensor(slots, b.c);
  b.valid.assign(slots, 0);
  b.slot_agent.assign(slots, -1);

  std::vector<ad::NodeId> parts;
  const auto place = [&](std::size_t block, const wire::QueryPayload& p, const Transform& rel,
                         bool is_ego) {
    parts.push_back(
        mln_align_graph(g, g.input(to_tensor(p.features, p.k, p.d)), rel, mln));
    // A short payload still owns a full block; its tail rows stay invalid.
    if (p.k < b.k) parts.push_back(g.input(Tensor(b.k - p.k, b.d)));
    fill_meta(b, block, p, rel, is_ego);
  };
  place(0, ego, Transform(), true);
  for (std::size_t a = 0; a < cavs.size(); ++a)
    place(a + 1, cavs[a], cav_relative(cavs[a], ego_pose), false);
  const std::size_t pad_rows = slots - (1 + cavs.size()) * b.k;
  if (pad_rows > 0) parts.push_back(g.input(Tensor(pad_rows, b.d)));

  out.q_all = g.concat_rows(parts);
  b.q_all = g.value(out.q_all);
  return out;
}

}  // namespace cqf::fusion
