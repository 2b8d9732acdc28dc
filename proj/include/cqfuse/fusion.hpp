#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cqfuse/geometry.hpp"
#include "cqfuse/graph.hpp"
#include "cqfuse/nn.hpp"
#include "cqfuse/rng.hpp"
#include "cqfuse/wire.hpp"

namespace cqf::fusion {

struct MaskConfig {
  double tau = 10.0;    // proximity radius in meters; inf disables distance gating
  double theta = 0.20;  // score gate; slots must exceed it strictly
  std::size_t max_agents = 4;
  bool use_qsm = true;
  bool use_pcm = true;
  bool use_ssm = true;
};

// Pairwise attention gate. blocked(i,j) true means query i must not read
// key j.
struct AttnMask {
  std::size_t n = 0;
  std::vector<std::uint8_t> blocked;

  explicit AttnMask(std::size_t n_ = 0) : n(n_), blocked(n_ * n_, 0) {}
  bool is_blocked(std::size_t i, std::size_t j) const { return blocked[i * n + j] != 0; }
  void set_blocked(std::size_t i, std::size_t j, bool b) { blocked[i * n + j] = b ? 1 : 0; }
};

// Pose-conditioned normalization: the flattened 4x4 relative transform is
// encoded to a per-agent (gamma, beta) pair that modulates layer-normalized
// features row-wise. `pos` embeds each slot's ego-frame center so slots for
// the same object, seen from different agents, carry comparable position
// information into attention.
struct MlnParams {
  nn::LinearParams enc1;       // 16 -> hidden
  nn::LinearParams enc2;       // hidden -> 2d
  nn::LayerNormParams norm;    // over d
  Tensor pos;                  // 3 -> d, bias-free center embedding
};

struct MhsaParams {
  nn::LinearParams wq, wk, wv, wo;  // all d -> d
  std::size_t heads = 4;
};

struct BlockParams {
  MhsaParams attn;
  nn::LayerNormParams ln1, ln2;
  nn::LinearParams ffn1;  // d -> f
  nn::LinearParams ffn2;  // f -> d
};

struct EqFormerParams {
  std::vector<BlockParams> blocks;  // three in the standard configuration
};

// Slot batch after alignment: max_agents * k rows, ego block first, zero
// padding at the tail for absent agents.
struct AlignedBatch {
  Tensor q_all;                        // (L*k) x d
  Tensor c_all;                        // (L*k) x 3, ego frame
  Tensor s_all;                        // (L*k) x c
  std::vector<std::uint8_t> valid;     // per slot
  std::vector<std::int32_t> slot_agent;  // agent index per slot, -1 padding
  std::size_t k = 0, d = 0, c = 0;

  std::size_t slots() const { return q_all.rows(); }
};

Tensor flatten_transform(const Transform& t);  // 1 x 16 row-major

// At identity initialization (zero enc2 weight, bias = ones then zeros)
// the module reduces to plain layer normalization.
MlnParams init_mln(Rng& rng, std::size_t d, std::size_t hidden);
MhsaParams init_mhsa(Rng& rng, std::size_t d, std::size_t heads);
EqFormerParams init_eqformer(Rng& rng, std::size_t d, std::size_t heads, std::size_t ffn_dim,
                             std::size_t blocks = 3);

Tensor mln_align(const Tensor& q, const Transform& relative, const MlnParams& p);

// Projects normalized slot centers (rows of `refs`) through the bias-free
// `pos` matrix; rows for invalid slots come out exactly zero, so padding
// stays inert. Callers add the result to the aligned features.
Tensor encode_centers(const Tensor& refs, const std::vector<std::uint8_t>& valid,
                      const Tensor& pos);

// Builds the slot batch from payloads: converts features to float64,
// motion-aligns every agent's features (identity transform for ego), maps
// centers into the ego frame, and zero-pads to max_agents blocks. All
// payloads must agree on k, d, c.
AlignedBatch align_and_concat(const wire::QueryPayload& ego,
                              std::span<const wire::QueryPayload> cavs, const Pose& ego_pose,
                              std::size_t max_agents, const MlnParams& mln);

// Validity gate: a pair is allowed only between two real (non-padded) slots.
AttnMask build_qsm(const std::vector<std::uint8_t>& valid);
// Proximity gate: allowed iff the 3D center distance is <= tau (boundary
// allowed).
AttnMask build_pcm(const Tensor& c_all, double tau);
// Score gate: allowed iff both slots' max class scores strictly exceed theta.
AttnMask build_ssm(const Tensor& s_all, double theta);
// Union of the individual blocks, then the diagonal is forced open so every
// query keeps at least itself.
AttnMask combine_masks(const AttnMask& qsm, const AttnMask& pcm, const AttnMask& ssm);
// Applies the config's use_* switches (a disabled gate blocks nothing).
AttnMask build_combined(const AlignedBatch& batch, const MaskConfig& cfg);

Tensor to_additive(const AttnMask& mask);  // 0 or nn::kNegBlock

Tensor masked_mhsa(const Tensor& x, const Tensor& additive_mask, const MhsaParams& p);

// Three post-norm blocks sharing one mask; returns every block's output
// (the deep-supervision taps), final layer last.
std::vector<Tensor> eqformer_forward(const AlignedBatch& batch, const MaskConfig& cfg,
                                     const EqFormerParams& p);

// ---- tape-building twins (bit-identical forward values) ----

struct MlnNodes {
  ad::NodeId enc1_w, enc1_b, enc2_w, enc2_b, gamma, beta, pos;
  double epsilon;
};
struct MhsaNodes {
  ad::NodeId wq_w, wq_b, wk_w, wk_b, wv_w, wv_b, wo_w, wo_b;
  std::size_t heads;
};
struct BlockNodes {
  MhsaNodes attn;
  ad::NodeId ln1_g, ln1_b, ln2_g, ln2_b;
  ad::NodeId ffn1_w, ffn1_b, ffn2_w, ffn2_b;
  double eps1, eps2;
};

MlnNodes register_mln(ad::Graph& g, const MlnParams& p);
MhsaNodes register_mhsa(ad::Graph& g, const MhsaParams& p);
std::vector<BlockNodes> register_eqformer(ad::Graph& g, const EqFormerParams& p);

ad::NodeId mln_align_graph(ad::Graph& g, ad::NodeId q, const Transform& relative,
                           const MlnNodes& p);
ad::NodeId encode_centers_graph(ad::Graph& g, const Tensor& refs,
                                const std::vector<std::uint8_t>& valid, ad::NodeId pos);
ad::NodeId masked_mhsa_graph(ad::Graph& g, ad::NodeId x, const Tensor& additive_mask,
                             const MhsaNodes& p);
std::vector<ad::NodeId> eqformer_graph(ad::Graph& g, ad::NodeId q_all,
                                       const Tensor& additive_mask,
                                       std::span<const BlockNodes> blocks);

// Graph version of align_and_concat over the same payloads; returns the
// q_all node plus the batch metadata (centers, scores, validity).
struct AlignedGraph {
  ad::NodeId q_all;
  AlignedBatch meta;  // q_all tensor inside is the forward value
};
AlignedGraph align_and_concat_graph(ad::Graph& g, const wire::QueryPayload& ego,
                                    std::span<const wire::QueryPayload> cavs,
                                    const Pose& ego_pose, std::size_t max_agents,
                                    const MlnNodes& mln);

}  // namespace cqf::fusion
