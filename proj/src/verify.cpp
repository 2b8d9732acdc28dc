#include "cqfuse/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "cqfuse/fusion.hpp"
#include "cqfuse/model.hpp"
#include "cqfuse/sim.hpp"

namespace cqf::verify {

namespace {

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(3);
  ss << v;
  return ss.str();
}

std::string trial_tag(std::size_t trial, std::uint64_t seed) {
  std::ostringstream ss;
  ss << "trial " << trial << " (seed " << seed << ")";
  return ss.str();
}

Tensor rand_t(Rng& rng, std::size_t r, std::size_t c, double lo, double hi) {
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

wire::QueryPayload rand_payload(Rng& rng, std::size_t k, std::size_t d, std::size_t c,
                                const Pose& pose, std::uint32_t id) {
  return wire::make_payload(rand_t(rng, k, d, -1, 1), rand_t(rng, k, 3, -20, 20),
                            rand_t(rng, k, c, 0, 1), pose, id);
}

Pose rand_pose(Rng& rng) {
  return Pose::from_yaw(rng.uniform(-3, 3), {rng.uniform(-30, 30), rng.uniform(-30, 30), 0});
}

// The gate definitions, written as plainly as possible: this is the
// oracle the production masks are checked against.
bool oracle_blocked(const fusion::AlignedBatch& b, const fusion::MaskConfig& cfg,
                    std::size_t i, std::size_t j) {
  if (i == j) return false;
  bool blocked = false;
  if (cfg.use_qsm && !(b.valid[i] && b.valid[j])) blocked = true;
  if (cfg.use_pcm) {
    double d2 = 0;
    for (int t = 0; t < 3; ++t) {
      const double diff = b.c_all(i, t) - b.c_all(j, t);
      d2 += diff * diff;
    }
    if (std::sqrt(d2) > cfg.tau) blocked = true;
  }
  if (cfg.use_ssm) {
    auto best = [&](std::size_t r) {
      double m = b.s_all(r, 0);
      for (std::size_t t = 1; t < b.s_all.cols(); ++t) m = std::max(m, b.s_all(r, t));
      return m;
    };
    if (!(best(i) > cfg.theta && best(j) > cfg.theta)) blocked = true;
  }
  return blocked;
}

fusion::AlignedBatch rand_mask_batch(Rng& rng, std::size_t n, std::size_t c) {
  fusion::AlignedBatch b;
  b.k = n;
  b.d = 2;
  b.c = c;
  b.q_all = Tensor(n, 2);
  b.c_all = rand_t(rng, n, 3, -30, 30);
  b.s_all = rand_t(rng, n, c, 0, 1);
  b.valid.assign(n, 1);
  b.slot_agent.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (rng.uniform() < 0.3) b.valid[i] = 0;
  return b;
}

// Straight-loop multi-head attention with textbook softmax; the sorted
// reductions in the production kernel must agree to float64 noise level.
Tensor naive_mhsa(const Tensor& x, const fusion::MhsaParams& p) {
  const std::size_t n = x.rows(), d = x.cols(), h = p.heads, dh = d / h;
  auto lin = [&](const nn::LinearParams& lp) {
    Tensor out(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = lp.bias(0, j);
        for (std::size_t t = 0; t < d; ++t) acc += x(i, t) * lp.weight(j, t);
        out(i, j) = acc;
      }
    return out;
  };
  const Tensor q = lin(p.wq), k = lin(p.wk), v = lin(p.wv);
  Tensor mixed(n, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t head = 0; head < h; ++head) {
    const std::size_t off = head * dh;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t t = 0; t < dh; ++t) s += q(i, off + t) * k(j, off + t);
        logits[j] = s * scale;
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double denom = 0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        denom += l;
      }
      for (std::size_t t = 0; t < dh; ++t) {
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += logits[j] / denom * v(j, off + t);
        mixed(i, off + t) = acc;
      }
    }
  }
  Tensor out(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = p.wo.bias(0, j);
      for (std::size_t t = 0; t < d; ++t) acc += mixed(i, t) * p.wo.weight(j, t);
      out(i, j) = acc;
    }
  return out;
}

bool point_in_box(const BBox3D& b, double px, double py, double cos_y, double sin_y) {
  const double dx = px - b.center.x, dy = py - b.center.y;
  const double lx = dx * cos_y + dy * sin_y;
  const double ly = -dx * sin_y + dy * cos_y;
  return std::abs(lx) <= b.length / 2 && std::abs(ly) <= b.width / 2;
}

bool same_detections(const std::vector<heads::Detection>& a,
                     const std::vector<heads::Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto &x = a[i], &y = b[i];
    if (x.score != y.score || x.class_id != y.class_id) return false;
    if (x.box.center.x != y.box.center.x || x.box.center.y != y.box.center.y ||
        x.box.center.z != y.box.center.z)
      return false;
    if (x.box.length != y.box.length || x.box.width != y.box.width ||
        x.box.height != y.box.height || x.box.yaw != y.box.yaw)
      return false;
  }
  return true;
}

PropertyResult timed(PropertyResult r, std::chrono::steady_clock::time_point t0) {
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

PropertyResult check_bandwidth() {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"wire", "bandwidth exactness", false, "", 0};

  if (wire::bandwidth_bits(50, 256, 1) != 416000) {
    r.detail = "bandwidth_bits(50,256,1) = " + std::to_string(wire::bandwidth_bits(50, 256, 1));
    return timed(r, t0);
  }
  if (wire::format_megabits(wire::bandwidth_bits(50, 256, 1)) != "0.416") {
    r.detail = "format(416000 bits) = " + wire::format_megabits(416000);
    return timed(r, t0);
  }
  if (wire::bandwidth_bits(120, 256, 1) != 998400 ||
      wire::format_megabits(wire::bandwidth_bits(120, 256, 1)) != "0.998") {
    r.detail = "k=120 row mismatch";
    return timed(r, t0);
  }
  // Linearity over the k sweep: equal increments of k*(d+3+c)*32.
  const std::uint64_t step = wire::bandwidth_bits(10, 256, 1);
  for (std::uint64_t k = 10; k <= 120; k += 10) {
    if (wire::bandwidth_bits(k, 256, 1) != step * (k / 10)) {
      r.detail = "nonlinear at k=" + std::to_string(k);
      return timed(r, t0);
    }
  }
  r.passed = true;
  r.detail = "416000 bits / 0.416 Mb, 998400 bits / 0.998 Mb, linear sweep";
  return timed(r, t0);
}

PropertyResult check_mask_oracles(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"fusion", "mask oracle equivalence", false, "", 0};

  constexpr std::size_t kTrials = 1000;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0xa5c0 + trial);
    Rng rng(s);
    const std::size_t n = 1 + rng.uniform_index(24);
    const std::size_t c = 1 + rng.uniform_index(3);
    const auto b = rand_mask_batch(rng, n, c);

    fusion::MaskConfig cfg;
    cfg.tau = rng.uniform() < 0.15 ? std::numeric_limits<double>::infinity()
                                   : rng.uniform(1, 40);
    cfg.theta = rng.uniform(0, 0.9);
    cfg.use_qsm = rng.uniform() < 0.8;
    cfg.use_pcm = rng.uniform() < 0.8;
    cfg.use_ssm = rng.uniform() < 0.8;

    const auto qsm = fusion::build_qsm(b.valid);
    const auto pcm = fusion::build_pcm(b.c_all, cfg.tau);
    const auto ssm = fusion::build_ssm(b.s_all, cfg.theta);
    const auto all = fusion::combine_masks(qsm, pcm, ssm);
    const auto gated = fusion::build_combined(b, cfg);

    fusion::MaskConfig every;  // all three gates on, for the plain union
    every.tau = cfg.tau;
    every.theta = cfg.theta;

    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        bool ok = qsm.is_blocked(i, j) == (!(b.valid[i] && b.valid[j]));
        ok = ok && pcm.is_blocked(i, j) ==
                       [&] {
                         double d2 = 0;
                         for (int t = 0; t < 3; ++t) {
                           const double diff = b.c_all(i, t) - b.c_all(j, t);
                           d2 += diff * diff;
                         }
                         return std::sqrt(d2) > cfg.tau;
                       }();
        ok = ok && ssm.is_blocked(i, j) ==
                       [&] {
                         auto best = [&](std::size_t row) {
                           double m = b.s_all(row, 0);
                           for (std::size_t t = 1; t < c; ++t)
                             m = std::max(m, b.s_all(row, t));
                           return m;
                         };
                         return !(best(i) > cfg.theta && best(j) > cfg.theta);
                       }();
        ok = ok && all.is_blocked(i, j) == oracle_blocked(b, every, i, j);
        ok = ok && gated.is_blocked(i, j) == oracle_blocked(b, cfg, i, j);
        if (!ok) {
          std::ostringstream ss;
          ss << trial_tag(trial, s) << " differs at (" << i << "," << j << ")";
          r.detail = ss.str();
          return timed(r, t0);
        }
      }
  }
  r.passed = true;
  r.detail = std::to_string(kTrials) + " randomized instances, exact";
  return timed(r, t0);
}

PropertyResult check_masked_key_non_influence(std::uint64_t seed, bool inject_fault) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"fusion", "masked-key non-influence", false, "", 0};

  constexpr std::size_t kTrials = 200;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0xb10c + trial);
    Rng rng(s);
    const std::size_t d = rng.uniform() < 0.5 ? 8 : 16;
    const std::size_t heads = rng.uniform() < 0.5 ? 2 : 4;
    const std::size_t n = 4 + rng.uniform_index(9);
    const auto p = fusion::init_mhsa(rng, d, heads);
    const Tensor x = rand_t(rng, n, d, -1.5, 1.5);

    fusion::AttnMask mask(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && rng.uniform() < 0.3) mask.set_blocked(i, j, true);

    // Collect keys that are blocked for at least one query.
    std::vector<std::pair<std::size_t, std::size_t>> blocked_pairs;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (mask.is_blocked(i, j)) blocked_pairs.emplace_back(i, j);
    if (blocked_pairs.empty()) {
      mask.set_blocked(0, n - 1, true);
      blocked_pairs.emplace_back(0, n - 1);
    }

    Tensor additive = fusion::to_additive(mask);
    const auto [fi, fj] = blocked_pairs[rng.uniform_index(blocked_pairs.size())];
    if (inject_fault) additive(fi, fj) = 0.0;  // the shim: one pair leaks

    const std::size_t key = inject_fault ? fj : blocked_pairs[0].second;
    const Tensor base = fusion::masked_mhsa(x, additive, p);
    Tensor x2 = x;
    for (std::size_t t = 0; t < d; ++t) x2(key, t) += rng.uniform(-3, 3);
    const Tensor mutated = fusion::masked_mhsa(x2, additive, p);

    for (std::size_t i = 0; i < n; ++i) {
      if (i == key || !mask.is_blocked(i, key)) continue;
      for (std::size_t t = 0; t < d; ++t) {
        if (base(i, t) != mutated(i, t)) {
          std::ostringstream ss;
          ss << trial_tag(trial, s) << ": blocked query " << i << " moved by "
             << fmt(mutated(i, t) - base(i, t)) << " after perturbing key " << key;
          r.detail = ss.str();
          return timed(r, t0);
        }
      }
    }
  }
  r.passed = true;
  r.detail = std::to_string(kTrials) + " (batch, mask, delta) trials, exact zeros";
  return timed(r, t0);
}

PropertyResult check_padding_invariance(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"fusion", "padding invariance", false, "", 0};

  constexpr std::size_t kTrials = 100;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0x9ad0 + trial);
    Rng rng(s);
    const std::size_t k = 2 + rng.uniform_index(4);
    const std::size_t d = rng.uniform() < 0.5 ? 8 : 16;
    const std::size_t c = 1 + rng.uniform_index(2);
    const std::size_t agents = 1 + rng.uniform_index(3);
    const std::size_t extra = 1 + rng.uniform_index(2);

    const auto mln = fusion::init_mln(rng, d, d);
    const auto former = fusion::init_eqformer(rng, d, 2, 2 * d);
    const auto ego = rand_payload(rng, k, d, c, Pose(), 0);
    std::vector<wire::QueryPayload> cavs;
    for (std::size_t a = 1; a < agents; ++a)
      cavs.push_back(rand_payload(rng, k, d, c, rand_pose(rng), static_cast<std::uint32_t>(a)));

    fusion::MaskConfig small_cfg, big_cfg;
    small_cfg.tau = big_cfg.tau = rng.uniform() < 0.2
                                      ? std::numeric_limits<double>::infinity()
                                      : rng.uniform(5, 25);
    small_cfg.theta = big_cfg.theta = rng.uniform(0, 0.5);
    small_cfg.max_agents = agents;
    big_cfg.max_agents = agents + extra;

    const auto small = fusion::align_and_concat(ego, cavs, Pose(), agents, mln);
    const auto big = fusion::align_and_concat(ego, cavs, Pose(), agents + extra, mln);
    const auto so = fusion::eqformer_forward(small, small_cfg, former);
    const auto bo = fusion::eqformer_forward(big, big_cfg, former);

    for (std::size_t l = 0; l < so.size(); ++l)
      for (std::size_t i = 0; i < agents * k; ++i)
        for (std::size_t j = 0; j < d; ++j)
          if (so[l](i, j) != bo[l](i, j)) {
            std::ostringstream ss;
            ss << trial_tag(trial, s) << ": layer " << l << " slot " << i
               << " changed with " << extra << " extra padded blocks";
            r.detail = ss.str();
            return timed(r, t0);
          }
  }
  r.passed = true;
  r.detail = std::to_string(kTrials) + " paired runs, exact";
  return timed(r, t0);
}

PropertyResult check_permutation_equivariance(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"fusion", "agent-permutation equivariance", false, "", 0};

  constexpr std::size_t kTrials = 100;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0x9e40 + trial);
    Rng rng(s);
    const std::size_t k = 2 + rng.uniform_index(3);
    const std::size_t d = rng.uniform() < 0.5 ? 8 : 16;
    const std::size_t c = 1;
    const std::size_t agents = 2 + rng.uniform_index(3);

    const auto mln = fusion::init_mln(rng, d, d);
    const auto former = fusion::init_eqformer(rng, d, 2, 2 * d);
    const auto ego = rand_payload(rng, k, d, c, Pose(), 0);
    std::vector<wire::QueryPayload> cavs;
    for (std::size_t a = 1; a < agents; ++a)
      cavs.push_back(rand_payload(rng, k, d, c, rand_pose(rng), static_cast<std::uint32_t>(a)));

    fusion::MaskConfig cfg;
    cfg.max_agents = agents;
    cfg.tau = rng.uniform(5, 25);
    cfg.theta = rng.uniform(0, 0.5);

    auto batch = fusion::align_and_concat(ego, cavs, Pose(), agents, mln);
    const auto base = fusion::eqformer_forward(batch, cfg, former);

    std::vector<std::size_t> perm(batch.slots());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[rng.uniform_index(i)]);

    fusion::AlignedBatch shuffled = batch;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) shuffled.q_all(i, j) = batch.q_all(perm[i], j);
      for (std::size_t j = 0; j < 3; ++j) shuffled.c_all(i, j) = batch.c_all(perm[i], j);
      for (std::size_t j = 0; j < c; ++j) shuffled.s_all(i, j) = batch.s_all(perm[i], j);
      shuffled.valid[i] = batch.valid[perm[i]];
      shuffled.slot_agent[i] = batch.slot_agent[perm[i]];
    }
    const auto permuted = fusion::eqformer_forward(shuffled, cfg, former);

    for (std::size_t l = 0; l < base.size(); ++l)
      for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          if (permuted[l](i, j) != base[l](perm[i], j)) {
            std::ostringstream ss;
            ss << trial_tag(trial, s) << ": layer " << l << " row " << i
               << " not equivariant";
            r.detail = ss.str();
            return timed(r, t0);
          }
  }
  r.passed = true;
  r.detail = std::to_string(kTrials) + " paired runs, exact";
  return timed(r, t0);
}

PropertyResult check_unmasked_degeneration(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"fusion", "unmasked degeneration", false, "", 0};

  constexpr std::size_t kTrials = 50;
  double worst = 0.0;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0xde9e + trial);
    Rng rng(s);
    const std::size_t d = rng.uniform() < 0.5 ? 8 : 16;
    const std::size_t heads = rng.uniform() < 0.5 ? 2 : 4;
    const std::size_t n = 4 + rng.uniform_index(7);
    const auto p = fusion::init_mhsa(rng, d, heads);
    const Tensor x = rand_t(rng, n, d, -1.5, 1.5);

    // tau = inf, theta = 0, all slots valid and positive-scoring: every
    // gate must degenerate to all-open.
    fusion::AlignedBatch b;
    b.k = n;
    b.d = d;
    b.c = 1;
    b.q_all = x;
    b.c_all = rand_t(rng, n, 3, -30, 30);
    b.s_all = rand_t(rng, n, 1, 0.01, 1.0);
    b.valid.assign(n, 1);
    b.slot_agent.assign(n, 0);
    fusion::MaskConfig cfg;
    cfg.tau = std::numeric_limits<double>::infinity();
    cfg.theta = 0.0;
    cfg.max_agents = 1;

    const Tensor additive = fusion::to_additive(fusion::build_combined(b, cfg));
    for (std::size_t i = 0; i < additive.size(); ++i)
      if (additive.data()[i] != 0.0) {
        r.detail = trial_tag(trial, s) + ": open config still blocks a pair";
        return timed(r, t0);
      }

    const Tensor masked = fusion::masked_mhsa(x, additive, p);
    const Tensor plain = naive_mhsa(x, p);
    for (std::size_t i = 0; i < masked.size(); ++i)
      worst = std::max(worst, std::abs(masked.data()[i] - plain.data()[i]));
    if (worst >= 1e-12) {
      r.detail = trial_tag(trial, s) + ": diff vs plain attention " + fmt(worst);
      return timed(r, t0);
    }
  }
  r.passed = true;
  r.detail = std::to_string(kTrials) + " trials, worst |diff| " + fmt(worst);
  return timed(r, t0);
}

PropertyResult check_gradients(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"model", "gradient verification", false, "", 0};

  model::Dims dims;
  dims.d = 16;
  dims.n_queries = 8;
  dims.k = 4;
  dims.max_agents = 2;
  dims.classes = 1;
  dims.heads = 4;
  dims.ffn = 32;
  dims.mln_hidden = 16;
  dims.blocks = 3;

  Rng rng(mix_seed(seed, 0x96ad));
  auto params = model::init_model(rng, dims);
  // Identity-initialized pieces (zero second MLN layer, unit gains) leave
  // whole rows of the Jacobian exactly zero; a small random shake makes
  // every parameter's gradient informative. The batch is kept gentle on
  // purpose: finite-difference noise grows with the loss magnitude, so a
  // small loss keeps the comparison about the derivatives, not roundoff.
  for (auto& [name, t] : model::named_params(params))
    for (std::size_t i = 0; i < t->size(); ++i) t->data()[i] += rng.normal(0.0, 0.05);

  auto gentle_payload = [&](const Pose& pose, std::uint32_t id) {
    return wire::make_payload(rand_t(rng, dims.k, dims.d, -0.5, 0.5),
                              rand_t(rng, dims.k, 3, -10, 10),
                              rand_t(rng, dims.k, dims.classes, 0, 1), pose, id);
  };
  const auto ego = gentle_payload(Pose(), 0);
  std::vector<wire::QueryPayload> cavs{
      gentle_payload(Pose::from_yaw(0.7, {8, -5, 0}), 1)};

  heads::Roi roi;
  std::vector<BBox3D> gts{BBox3D({4, 2, 0}, 1.3, 0.8, 1.1, 0.2)};
  std::vector<std::size_t> gt_classes{0};

  fusion::MaskConfig mask;
  mask.max_agents = dims.max_agents;
  heads::LossWeights weights;
  // The finite-difference oracle's roundoff is proportional to the loss
  // value; scaling both stages down keeps the identical derivative graph
  // while the probe noise stays well under the tolerance.
  weights.w_sin = 0.25;
  weights.w_co = 0.25;

  auto ego_feats_tensor = [&] {
    Tensor t(dims.k, dims.d);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = ego.features[i];
    return t;
  }();
  auto ego_centers_tensor = [&] {
    Tensor t(dims.k, 3);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = ego.centers[i];
    return t;
  }();
  const Tensor ego_refs = heads::normalize_refs(ego_centers_tensor, roi);

  struct Built {
    ad::Graph g;
    model::ModelNodes nodes;
    heads::StageSupervision sin_stage, coop_stage;
    ad::NodeId loss;
  };
  auto build = [&](std::span<const heads::Assignment> frozen_sin,
                   std::span<const heads::Assignment> frozen_coop) {
    auto built = std::make_unique<Built>();
    ad::Graph& g = built->g;
    built->nodes = model::register_model(g, params);
    const auto ag =
        fusion::align_and_concat_graph(g, ego, cavs, Pose(), dims.max_agents, built->nodes.mln);
    const Tensor coop_refs = heads::normalize_refs(ag.meta.c_all, roi);
    const ad::NodeId q_in = g.add(
        ag.q_all,
        fusion::encode_centers_graph(g, coop_refs, ag.meta.valid, built->nodes.mln.pos));
    const Tensor additive = fusion::to_additive(fusion::build_combined(ag.meta, mask));
    const auto layers = fusion::eqformer_graph(g, q_in, additive, built->nodes.blocks);

    const std::vector<ad::NodeId> single_span{g.input(ego_feats_tensor)};
    built->sin_stage =
        heads::stage_loss_graph(g, single_span, ego_refs, built->nodes.sin_head, gts,
                                gt_classes, dims.classes, roi, weights, frozen_sin);
    built->coop_stage = heads::stage_loss_graph(g, layers, coop_refs, built->nodes.co_head,
                                                gts, gt_classes, dims.classes, roi, weights,
                                                frozen_coop);
    built->loss = g.add(g.scale(built->sin_stage.total, weights.w_sin),
                        g.scale(built->coop_stage.total, weights.w_co));
    return built;
  };

  // Hungarian matching is piecewise constant; freeze the assignments from
  // the unperturbed point so finite differences probe a smooth function.
  const auto base = build({}, {});
  const auto frozen_sin = base->sin_stage.assignments;
  const auto frozen_coop = base->coop_stage.assignments;

  auto probe = build(frozen_sin, frozen_coop);
  probe->g.backward(probe->loss);
  const auto analytic = model::collect_grads(probe->g, probe->nodes);

  auto named = model::named_params(params);
  const auto report = ad::finite_diff_check(
      named,
      [&] {
        auto b = build(frozen_sin, frozen_coop);
        return b->g.value(b->loss)(0, 0);
      },
      analytic, 1e-6);

  r.passed = report.passed(1e-4);
  r.detail = "worst rel err " + fmt(report.worst_rel_err) + " at " + report.worst_name;
  if (!r.passed) r.detail += " (seed " + std::to_string(mix_seed(seed, 0x96ad)) + ")";
  return timed(r, t0);
}

PropertyResult check_hungarian(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"heads", "hungarian correctness", false, "", 0};

  constexpr std::size_t kTrials = 500;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0x40a9 + trial);
    Rng rng(s);
    const std::size_t rows = 1 + rng.uniform_index(7);
    const std::size_t cols = 1 + rng.uniform_index(7);
    Tensor cost(rows, cols);
    for (std::size_t i = 0; i < cost.size(); ++i) {
      double v = rng.uniform(0, 10);
      if (rng.uniform() < 0.25) v = std::floor(v * 4) / 4;  // planted ties
      cost.data()[i] = v;
    }

    const auto got = heads::solve_assignment(cost);

    // Exhaustive minimum. Permuting the larger side and pairing the first
    // min(rows, cols) positions enumerates every possible assignment.
    const std::size_t m = std::min(rows, cols);
    double best = std::numeric_limits<double>::infinity();
    if (rows <= cols) {
      std::vector<std::size_t> perm(cols);
      std::iota(perm.begin(), perm.end(), 0);
      do {
        double tot = 0;
        for (std::size_t i = 0; i < m; ++i) tot += cost(i, perm[i]);
        best = std::min(best, tot);
      } while (std::next_permutation(perm.begin(), perm.end()));
    } else {
      std::vector<std::size_t> perm(rows);
      std::iota(perm.begin(), perm.end(), 0);
      do {
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (std::size_t j = 0; j < m; ++j) pairs.emplace_back(perm[j], j);
        std::sort(pairs.begin(), pairs.end());
        double tot = 0;
        for (const auto& [i, j] : pairs) tot += cost(i, j);
        best = std::min(best, tot);
      } while (std::next_permutation(perm.begin(), perm.end()));
    }

    bool ok = got.pairs.size() == m && got.total_cost == best;
    std::vector<bool> row_used(rows, false), col_used(cols, false);
    for (const auto& [i, j] : got.pairs) {
      if (i >= rows || j >= cols || row_used[i] || col_used[j]) ok = false;
      if (!ok) break;
      row_used[i] = col_used[j] = true;
    }
    if (!ok) {
      std::ostringstream ss;
      ss << trial_tag(trial, s) << ": " << rows << "x" << cols << " got "
         << fmt(got.total_cost) << " want " << fmt(best);
      r.detail = ss.str();
      return timed(r, t0);
    }
  }
  r.passed = true;
  r.detail = std::to_string(kTrials) + " matrices vs exhaustive minimum, exact";
  return timed(r, t0);
}

PropertyResult check_iou(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"geometry", "rotated BEV IoU", false, "", 0};

  // Analytic anchors first.
  {
    const BBox3D a({1.3, -0.4, 0}, 3.7, 1.9, 1.5, 0.83);
    if (std::abs(bev_iou(a, a) - 1.0) >= 1e-12) {
      r.detail = "identical boxes: " + fmt(bev_iou(a, a));
      return timed(r, t0);
    }
    const BBox3D far({100, 100, 0}, 2, 2, 2, 0.3);
    if (bev_iou(a, far) != 0.0) {
      r.detail = "disjoint boxes: " + fmt(bev_iou(a, far));
      return timed(r, t0);
    }
    const BBox3D u1({0, 0, 0}, 1, 1, 1, 0.0), u2({0.5, 0, 0}, 1, 1, 1, 0.0);
    if (std::abs(bev_iou(u1, u2) - 1.0 / 3.0) >= 1e-12) {
      r.detail = "half-shifted unit squares: " + fmt(bev_iou(u1, u2));
      return timed(r, t0);
    }
  }

  constexpr std::size_t kPairs = 200;
  constexpr std::size_t kSamples = 1000000;
  double worst = 0.0;
  for (std::size_t trial = 0; trial < kPairs; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0x10a0 + trial);
    Rng rng(s);
    auto box = [&] {
      return BBox3D({rng.uniform(-3, 3), rng.uniform(-3, 3), 0}, rng.uniform(0.5, 5),
                    rng.uniform(0.5, 5), 1.0, rng.uniform(-3.14, 3.14));
    };
    const BBox3D a = box(), b = box();
    const double got = bev_iou(a, b);

    double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x;
    double lo_y = lo_x, hi_y = -lo_x;
    for (const auto& bb : {a, b})
      for (const auto& v : bb.bev_corners()) {
        lo_x = std::min(lo_x, v.x);
        hi_x = std::max(hi_x, v.x);
        lo_y = std::min(lo_y, v.y);
        hi_y = std::max(hi_y, v.y);
      }

    const double ca = std::cos(a.yaw), sa = std::sin(a.yaw);
    const double cb = std::cos(b.yaw), sb = std::sin(b.yaw);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < kSamples; ++i) {
      const double px = rng.uniform(lo_x, hi_x);
      const double py = rng.uniform(lo_y, hi_y);
      const bool ia = point_in_box(a, px, py, ca, sa);
      const bool ib = point_in_box(b, px, py, cb, sb);
      inter += ia && ib;
      uni += ia || ib;
    }
    const double mc = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
    worst = std::max(worst, std::abs(got - mc));
    if (std::abs(got - mc) >= 1e-2) {
      std::ostringstream ss;
      ss << trial_tag(trial, s) << ": analytic " << fmt(got) << " vs monte-carlo " << fmt(mc);
      r.detail = ss.str();
      return timed(r, t0);
    }
  }
  r.passed = true;
  r.detail = std::to_string(kPairs) + " pairs, worst |analytic - MC| " + fmt(worst);
  return timed(r, t0);
}

PropertyResult check_wire(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PropertyResult r{"wire", "wire integrity", false, "", 0};

  constexpr std::size_t kTrials = 1000;
  for (std::size_t trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0x31e0 + trial);
    Rng rng(s);
    const std::size_t k = 1 + rng.uniform_index(16);
    const std::size_t d = 1 + rng.uniform_index(64);
    const std::size_t c = 1 + rng.uniform_index(4);
    const auto p = rand_payload(rng, k, d, c, rand_pose(rng), static_cast<std::uint32_t>(trial));
    const auto back = wire::deserialize(wire::serialize(p));
    if (!(back == p)) {
      r.detail = trial_tag(trial, s) + ": payload changed across the wire";
      return timed(r, t0);
    }
    const auto frame = wire::serialize(p);
    if (frame.bytes.size() != wire::frame_size_bytes(k, d, c)) {
      r.detail = trial_tag(trial, s) + ": frame size mismatch";
      return timed(r, t0);
    }
  }

  // End to end: inserting the byte stage must not change any detection.
  for (std::size_t trial = 0; trial < 3; ++trial) {
    const std::uint64_t s = mix_seed(seed, 0x31f0 + trial);
    sim::ScenarioConfig scn_cfg;
    const auto scn = sim::gen_scenario(s, scn_cfg);
    Rng mrng(mix_seed(s, 0x3));
    const auto params = model::init_model(mrng, model::Dims{});
    sim::PipelineConfig cfg;
    cfg.use_wire = true;
    auto with_wire = sim::run_pipeline(scn, params, cfg, s);
    cfg.use_wire = false;
    auto bypass = sim::run_pipeline(scn, params, cfg, s);
    if (!same_detections(with_wire.detections, bypass.detections) ||
        with_wire.eval.ap50 != bypass.eval.ap50) {
      r.detail = "pipeline seed " + std::to_string(s) + ": wire insertion changed detections";
      return timed(r, t0);
    }
  }
  r.passed = true;
  r.detail = std::to_string(kTrials) + " round trips bit-exact; pipeline unaffected by wire";
  return timed(r, t0);
}

std::vector<PropertyResult> run_all(const Options& opt) {
  std::vector<PropertyResult> out;
  auto guard = [&out](const char* module, const char* name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({module, name, false, std::string("exception: ") + e.what(), 0.0});
    }
  };
  guard("wire", "bandwidth exactness", [&] { return check_bandwidth(); });
  guard("fusion", "mask oracle equivalence", [&] { return check_mask_oracles(opt.seed); });
  guard("fusion", "masked-key non-influence",
        [&] { return check_masked_key_non_influence(opt.seed, opt.inject_mask_fault); });
  guard("fusion", "padding invariance", [&] { return check_padding_invariance(opt.seed); });
  guard("fusion", "agent-permutation equivariance",
        [&] { return check_permutation_equivariance(opt.seed); });
  guard("fusion", "unmasked degeneration", [&] { return check_unmasked_degeneration(opt.seed); });
  guard("model", "gradient verification", [&] { return check_gradients(opt.seed); });
  guard("heads", "hungarian correctness", [&] { return check_hungarian(opt.seed); });
  guard("geometry", "rotated BEV IoU", [&] { return check_iou(opt.seed); });
  guard("wire", "wire integrity", [&] { return check_wire(opt.seed); });
  return out;
}

bool all_passed(const std::vector<PropertyResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const PropertyResult& r) { return r.passed; });
}

}  // namespace cqf::verify
