#include "cqfuse/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace cqf::sim {

namespace {

using json = nlohmann::json;

double bev_dist(const Vec3& a, const Vec3& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

double dist3(const Vec3& a, const Vec3& b) {
  return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) +
                   (a.z - b.z) * (a.z - b.z));
}

double agent_yaw(const Pose& p) { return std::atan2(p.rotation[3], p.rotation[0]); }

}  // namespace

Scenario gen_scenario(std::uint64_t seed, const ScenarioConfig& cfg) {
  if (cfg.n_cavs + 1 > cfg.max_agents)
    throw std::invalid_argument("gen_scenario: n_cavs + ego exceeds max_agents");
  if (cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects)
    throw std::invalid_argument("gen_scenario: bad object count range");

  Rng rng(mix_seed(seed, 0x5ce9a410));
  Scenario s;
  s.seed = seed;
  s.roi = cfg.roi;

  Agent ego;
  ego.sensing_range = rng.uniform(cfg.ego_sensing_min, cfg.ego_sensing_max);
  s.agents.push_back(ego);
  for (std::size_t i = 0; i < cfg.n_cavs; ++i) {
    const double r = rng.uniform(cfg.cav_ring_min, cfg.cav_ring_max);
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Agent a;
    a.pose = Pose::from_yaw(0.0, {r * std::cos(phi), r * std::sin(phi), 0.0});
    a.sensing_range = rng.uniform(cfg.sensing_min, cfg.sensing_max);
    s.agents.push_back(a);
  }

  const std::size_t n_objects =
      cfg.min_objects + rng.uniform_index(cfg.max_objects - cfg.min_objects + 1);
  const double margin = 3.0;  // keeps full extents inside the roi
  for (std::size_t o = 0; o < n_objects; ++o) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Vec3 c{rng.uniform(cfg.roi.min_pt.x + margin, cfg.roi.max_pt.x - margin),
             rng.uniform(cfg.roi.min_pt.y + margin, cfg.roi.max_pt.y - margin),
             rng.uniform(-0.3, 0.3)};
      bool ok = true;
      for (const auto& other : s.objects)
        if (bev_dist(c, other.box.center) < cfg.min_spacing) ok = false;
      bool covered = false;
      for (const auto& a : s.agents)
        if (dist3(a.pose.translation, c) <= a.sensing_range) covered = true;
      if (!ok || !covered) continue;
      SimObject obj;
      obj.box = BBox3D(c, rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.8),
                       rng.uniform(-std::numbers::pi, std::numbers::pi));
      obj.class_id = 0;
      for (std::size_t t = 0; t < kTagDim; ++t) obj.tag.push_back(rng.normal());
      s.objects.push_back(std::move(obj));
      placed = true;
    }
    if (!placed)
      throw std::runtime_error(
          "gen_scenario: unable to place objects at the requested density");
  }

  s.visible.assign(s.agents.size(), std::vector<std::uint8_t>(s.objects.size(), 0));
  for (std::size_t a = 0; a < s.agents.size(); ++a)
    for (std::size_t o = 0; o < s.objects.size(); ++o)
      s.visible[a][o] =
          dist3(s.agents[a].pose.translation, s.objects[o].box.center) <=
          s.agents[a].sensing_range;

  // Ego occlusion: only objects some CAV also covers can be occluded, so
  // every occluded object stays recoverable through collaboration.
  for (std::size_t o = 0; o < s.objects.size(); ++o) {
    if (!s.visible[0][o]) continue;
    bool cav_covers = false;
    for (std::size_t a = 1; a < s.agents.size(); ++a)
      if (s.visible[a][o]) cav_covers = true;
    if (cav_covers && rng.uniform() < cfg.occlusion_fraction) s.visible[0][o] = 0;
  }
  return s;
}

void dump_scenario(const std::filesystem::path& path, const Scenario& s) {
  json j;
  j["version"] = 1;
  j["seed"] = s.seed;
  j["roi"] = {{"min", {s.roi.min_pt.x, s.roi.min_pt.y, s.roi.min_pt.z}},
              {"max", {s.roi.max_pt.x, s.roi.max_pt.y, s.roi.max_pt.z}}};
  j["agents"] = json::array();
  for (const auto& a : s.agents) {
    j["agents"].push_back(
        {{"rotation", a.pose.rotation},
         {"translation", {a.pose.translation.x, a.pose.translation.y, a.pose.translation.z}},
         {"sensing_range", a.sensing_range}});
  }
  j["objects"] = json::array();
  for (const auto& o : s.objects) {
    j["objects"].push_back({{"center", {o.box.center.x, o.box.center.y, o.box.center.z}},
                            {"length", o.box.length},
                            {"width", o.box.width},
                            {"height", o.box.height},
                            {"yaw", o.box.yaw},
                            {"class_id", o.class_id},
                            {"tag", o.tag}});
  }
  j["visible"] = s.visible;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("dump_scenario: cannot open " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("dump_scenario: write failed for " + path.string());
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_scenario: cannot open " + path.string());
  json j;
  f >> j;
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("load_scenario: unsupported version in " + path.string());
  Scenario s;
  s.seed = j.at("seed").get<std::uint64_t>();
  const auto& roi = j.at("roi");
  s.roi.min_pt = {roi.at("min")[0], roi.at("min")[1], roi.at("min")[2]};
  s.roi.max_pt = {roi.at("max")[0], roi.at("max")[1], roi.at("max")[2]};
  for (const auto& a : j.at("agents")) {
    Agent agent;
    agent.pose = Pose(a.at("rotation").get<std::array<double, 9>>(),
                      {a.at("translation")[0], a.at("translation")[1], a.at("translation")[2]});
    agent.sensing_range = a.at("sensing_range").get<double>();
    s.agents.push_back(agent);
  }
  for (const auto& o : j.at("objects")) {
    SimObject obj;
    obj.box = BBox3D({o.at("center")[0], o.at("center")[1], o.at("center")[2]},
                     o.at("length").get<double>(), o.at("width").get<double>(),
                     o.at("height").get<double>(), o.at("yaw").get<double>());
    obj.class_id = o.at("class_id").get<std::size_t>();
    obj.tag = o.at("tag").get<std::vector<double>>();
    s.objects.push_back(std::move(obj));
  }
  s.visible = j.at("visible").get<std::vector<std::vector<std::uint8_t>>>();
  return s;
}

Tensor embedding_matrix(std::size_t d, std::uint64_t embed_seed) {
  Rng rng(mix_seed(embed_seed, 0xe3bed));
  Tensor e(d, kAttrDim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kAttrDim));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < kAttrDim; ++j) e(i, j) = rng.normal() * scale;
  return e;
}

DetectorOutput emulate_detector(const Scenario& scn, std::size_t agent_idx,
                                const EmulatorConfig& cfg, Rng& rng) {
  if (agent_idx >= scn.agents.size())
    throw std::invalid_argument("emulate_detector: no such agent");
  const Agent& agent = scn.agents[agent_idx];
  const Transform world_to_agent = invert(Transform::from_pose(agent.pose));
  const double a_yaw = agent_yaw(agent.pose);
  const Tensor embed = embedding_matrix(cfg.d, cfg.embed_seed);
  const Vec3 half{(scn.roi.max_pt.x - scn.roi.min_pt.x) / 2.0,
                  (scn.roi.max_pt.y - scn.roi.min_pt.y) / 2.0,
                  (scn.roi.max_pt.z - scn.roi.min_pt.z) / 2.0};

  DetectorOutput out;
  out.features = Tensor(cfg.n_queries, cfg.d);
  out.centers = Tensor(cfg.n_queries, 3);
  out.scores = Tensor(cfg.n_queries, cfg.classes);
  out.query_object.assign(cfg.n_queries, -1);
  out.boxes.assign(cfg.n_queries, BBox3D({0, 0, 0}, 4.0, 2.0, 1.5, 0.0));

  std::size_t row = 0;
  auto embed_attrs = [&](const BBox3D& measured, const std::vector<double>& tag) {
    std::vector<double> attr(kAttrDim, 0.0);
    attr[0] = measured.center.x / half.x;
    attr[1] = measured.center.y / half.y;
    attr[2] = measured.center.z / half.z;
    attr[3] = std::log(measured.length);
    attr[4] = std::log(measured.width);
    attr[5] = std::log(measured.height);
    attr[6] = std::sin(measured.yaw);
    attr[7] = std::cos(measured.yaw);
    for (std::size_t t = 0; t < kTagDim; ++t) attr[8 + t] = tag[t];
    std::vector<double> f(cfg.d, 0.0);
    for (std::size_t i = 0; i < cfg.d; ++i)
      for (std::size_t j = 0; j < kAttrDim; ++j) f[i] += embed(i, j) * attr[j];
    return f;
  };

  for (std::size_t o = 0; o < scn.objects.size() && row < cfg.n_queries; ++o) {
    if (!scn.visible[agent_idx][o]) continue;
    const SimObject& obj = scn.objects[o];
    const double d = dist3(agent.pose.translation, obj.box.center);
    const double frac = agent.sensing_range > 0 ? d / agent.sensing_range : 0.0;
    const double sigma_xy = cfg.sigma_center * (1.0 + cfg.sigma_center_growth * frac);

    const Vec3 true_local = transform_point(world_to_agent, obj.box.center);
    BBox3D measured(
        {true_local.x + rng.normal(0.0, sigma_xy), true_local.y + rng.normal(0.0, sigma_xy),
         true_local.z + rng.normal(0.0, cfg.sigma_z)},
        obj.box.length * std::max(0.2, 1.0 + rng.normal(0.0, cfg.sigma_size)),
        obj.box.width * std::max(0.2, 1.0 + rng.normal(0.0, cfg.sigma_size)),
        obj.box.height * std::max(0.2, 1.0 + rng.normal(0.0, cfg.sigma_size)),
        normalize_yaw(obj.box.yaw - a_yaw + rng.normal(0.0, cfg.sigma_yaw)));

    const auto f = embed_attrs(measured, obj.tag);
    for (std::size_t i = 0; i < cfg.d; ++i)
      out.features(row, i) = f[i] + rng.normal(0.0, cfg.sigma_feature);
    out.centers(row, 0) = measured.center.x;
    out.centers(row, 1) = measured.center.y;
    out.centers(row, 2) = measured.center.z;
    const double score = 1.0 - (1.0 - cfg.score_floor) * std::min(1.0, frac);
    for (std::size_t c = 0; c < cfg.classes; ++c)
      out.scores(row, c) = c == obj.class_id ? score : 0.02;
    out.query_object[row] = static_cast<int>(o);
    out.boxes[row] = measured;
    ++row;
  }

  for (; row < cfg.n_queries; ++row) {
    const double r = agent.sensing_range * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    out.centers(row, 0) = r * std::cos(phi);
    out.centers(row, 1) = r * std::sin(phi);
    out.centers(row, 2) = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < cfg.d; ++i) out.features(row, i) = rng.normal() * 0.8;
    for (std::size_t c = 0; c < cfg.classes; ++c)
      out.scores(row, c) = cfg.background_cap - (cfg.background_cap - 0.02) * rng.uniform();
    out.boxes[row].center = {out.centers(row, 0), out.centers(row, 1), out.centers(row, 2)};
  }
  return out;
}

std::vector<DetectorOutput> emulate_all(const Scenario& scn, const EmulatorConfig& cfg,
                                        std::uint64_t seed) {
  std::vector<DetectorOutput> outs;
  const Rng root(seed);
  for (std::size_t a = 0; a < scn.agents.size(); ++a) {
    Rng r = root.fork(a);
    outs.push_back(emulate_detector(scn, a, cfg, r));
  }
  return outs;
}

std::vector<heads::Detection> suppress_duplicates(std::vector<heads::Detection> dets,
                                                  double iou_thr) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<heads::Detection> kept;
  for (const auto& det : dets) {
    bool dup = false;
    for (const auto& k : kept)
      if (bev_iou(det.box, k.box) >= iou_thr) dup = true;
    if (!dup) kept.push_back(det);
  }
  return kept;
}

namespace {

struct MatchOutcome {
  std::vector<std::uint8_t> tp;  // per detection, score-descending order
  std::size_t n_gts = 0;
};

MatchOutcome greedy_match(const std::vector<heads::Detection>& dets,
                          const std::vector<BBox3D>& gts, double iou_thr) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  MatchOutcome out;
  out.n_gts = gts.size();
  std::vector<std::uint8_t> taken(gts.size(), 0);
  for (std::size_t idx : order) {
    double best = 0.0;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (taken[j]) continue;
      const double iou = bev_iou(dets[idx].box, gts[j]);
      if (iou >= iou_thr && iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best_j < gts.size()) {
      taken[best_j] = 1;
      out.tp.push_back(1);
    } else {
      out.tp.push_back(0);
    }
  }
  return out;
}

}  // namespace

double eval_ap(const std::vector<heads::Detection>& dets, const std::vector<BBox3D>& gts,
               double iou_thr) {
  if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
  if (dets.empty()) return 0.0;
  const auto m = greedy_match(dets, gts, iou_thr);
  const std::size_t n = m.tp.size();
  std::vector<double> prec(n), rec(n);
  std::size_t tp_cum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp_cum += m.tp[i];
    prec[i] = static_cast<double>(tp_cum) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp_cum) / static_cast<double>(m.n_gts);
  }
  // All-point interpolation: precision envelope from the right, integrated
  // over recall increments.
  for (std::size_t i = n - 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0.0, prev_rec = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (rec[i] > prev_rec) {
      ap += (rec[i] - prev_rec) * prec[i];
      prev_rec = rec[i];
    }
  }
  return ap;
}

std::vector<std::pair<double, double>> pr_curve(const std::vector<heads::Detection>& dets,
                                                const std::vector<BBox3D>& gts,
                                                double iou_thr) {
  std::vector<std::pair<double, double>> pts;
  if (gts.empty() || dets.empty()) return pts;
  const auto m = greedy_match(dets, gts, iou_thr);
  std::size_t tp_cum = 0;
  for (std::size_t i = 0; i < m.tp.size(); ++i) {
    tp_cum += m.tp[i];
    pts.emplace_back(static_cast<double>(tp_cum) / static_cast<double>(m.n_gts),
                     static_cast<double>(tp_cum) / static_cast<double>(i + 1));
  }
  return pts;
}

namespace {

// CAV indices allowed to transmit: index order, capped, range-gated.
std::vector<std::size_t> transmitting_cavs(const Scenario& scn, const PipelineConfig& cfg) {
  std::vector<std::size_t> ids;
  for (std::size_t a = 1; a < scn.agents.size(); ++a) {
    if (ids.size() >= cfg.use_cavs) break;
    if (dist3(scn.agents[a].pose.translation, scn.agents[0].pose.translation) <=
        cfg.comm_range)
      ids.push_back(a);
  }
  return ids;
}

std::vector<BBox3D> gt_boxes(const Scenario& scn) {
  std::vector<BBox3D> gts;
  for (const auto& o : scn.objects) gts.push_back(o.box);
  return gts;
}

}  // namespace

PipelineResult run_pipeline_on(const Scenario& scn, std::span<const DetectorOutput> outputs,
                               const model::ModelParams& m, const PipelineConfig& cfg) {
  if (outputs.size() != scn.agents.size())
    throw std::invalid_argument("run_pipeline: one detector output per agent required");
  if (cfg.emu.d != m.dims.d)
    throw std::invalid_argument("run_pipeline: emulator width does not match the model");

  const std::size_t ego_k = cfg.ego_k > 0 ? cfg.ego_k : cfg.k;
  wire::QueryPayload ego = wire::top_k_select(outputs[0].features, outputs[0].centers,
                                              outputs[0].scores, ego_k, scn.agents[0].pose, 0);
  std::vector<wire::QueryPayload> cavs;
  const auto cav_ids = transmitting_cavs(scn, cfg);
  for (std::size_t a : cav_ids) {
    wire::QueryPayload p =
        wire::top_k_select(outputs[a].features, outputs[a].centers, outputs[a].scores, cfg.k,
                           scn.agents[a].pose, static_cast<std::uint32_t>(a));
    if (cfg.use_wire) p = wire::deserialize(wire::serialize(p));
    cavs.push_back(std::move(p));
  }

  auto aligned =
      fusion::align_and_concat(ego, cavs, scn.agents[0].pose, cfg.mask.max_agents, m.mln);
  const Tensor refs = heads::normalize_refs(aligned.c_all, cfg.roi);
  aligned.q_all = nn::add(aligned.q_all, fusion::encode_centers(refs, aligned.valid, m.mln.pos));
  const auto layers = fusion::eqformer_forward(aligned, cfg.mask, m.former);
  const auto raw = heads::head_forward(layers.back(), refs, m.co_head, cfg.roi);

  std::vector<heads::Detection> dets;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!aligned.valid[i]) continue;
    // Same strict gate the score-selective mask applies inside attention:
    // a slot whose transmitted score never cleared theta is not a
    // detection candidate.
    double sent = 0.0;
    for (std::size_t c = 0; c < aligned.s_all.cols(); ++c)
      sent = std::max(sent, aligned.s_all(i, c));
    if (!(sent > cfg.mask.theta)) continue;
    if (raw[i].score >= cfg.score_threshold) dets.push_back(raw[i]);
  }
  PipelineResult res;
  res.detections = suppress_duplicates(std::move(dets), cfg.nms_iou);

  const auto gts = gt_boxes(scn);
  res.eval.ap50 = eval_ap(res.detections, gts, 0.5);
  res.eval.ap70 = eval_ap(res.detections, gts, 0.7);
  res.eval.pr50 = pr_curve(res.detections, gts, 0.5);
  res.eval.bandwidth_bits =
      static_cast<std::uint64_t>(cav_ids.size()) *
      wire::bandwidth_bits(cfg.k, cfg.emu.d, cfg.emu.classes);
  return res;
}

PipelineResult run_pipeline(const Scenario& scn, const model::ModelParams& m,
                            const PipelineConfig& cfg, std::uint64_t seed) {
  const auto outputs = emulate_all(scn, cfg.emu, seed);
  return run_pipeline_on(scn, outputs, m, cfg);
}

LateFusionResult late_fusion_baseline(const Scenario& scn,
                                      std::span<const DetectorOutput> outputs,
                                      const PipelineConfig& cfg) {
  if (outputs.size() != scn.agents.size())
    throw std::invalid_argument("late_fusion_baseline: one detector output per agent required");
  LateFusionResult res;
  const Transform to_ego_base = invert(Transform::from_pose(scn.agents[0].pose));
  std::vector<std::size_t> agents{0};
  for (std::size_t a : transmitting_cavs(scn, cfg)) agents.push_back(a);

  for (std::size_t a : agents) {
    const Transform to_ego = compose(to_ego_base, Transform::from_pose(scn.agents[a].pose));
    const double dyaw = std::atan2(to_ego.at(1, 0), to_ego.at(0, 0));
    std::uint64_t shared = 0;
    for (std::size_t row = 0; row < outputs[a].scores.rows(); ++row) {
      double best = 0.0;
      std::size_t best_c = 0;
      for (std::size_t c = 0; c < outputs[a].scores.cols(); ++c)
        if (outputs[a].scores(row, c) > best) {
          best = outputs[a].scores(row, c);
          best_c = c;
        }
      if (best < cfg.score_threshold) continue;
      const BBox3D& b = outputs[a].boxes[row];
      heads::Detection det;
      det.box = BBox3D(transform_point(to_ego, b.center), b.length, b.width, b.height,
                       normalize_yaw(b.yaw + dyaw));
      det.score = best;
      det.class_id = best_c;
      res.detections.push_back(det);
      ++shared;
    }
    if (a != 0) res.bandwidth_bits += shared * 8 * 32;  // 8 float32 box values
  }
  res.detections = suppress_duplicates(std::move(res.detections), cfg.nms_iou);
  return res;
}

namespace {

Tensor floats_to_tensor(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) t.data()[i] = static_cast<double>(v[i]);
  return t;
}

}  // namespace

TrainResult train_toy(const TrainConfig& cfg) {
  if (cfg.emu.d != cfg.dims.d)
    throw std::invalid_argument("train_toy: emulator width does not match the model");
  if (cfg.dims.k > cfg.emu.n_queries)
    throw std::invalid_argument("train_toy: k exceeds the emulator query count");
  if (cfg.batch == 0) throw std::invalid_argument("train_toy: batch must be positive");

  Rng init_rng(mix_seed(cfg.seed, 0x11217));
  model::ModelParams params = model::init_model(init_rng, cfg.dims);
  model::AdamState opt;
  opt.cfg = cfg.adam;

  model::ModelParams last_good = params;
  TrainResult result;

  PipelineConfig val_cfg;
  val_cfg.k = cfg.dims.k;
  val_cfg.mask = cfg.mask;
  val_cfg.score_threshold = cfg.score_threshold;
  val_cfg.use_wire = false;
  val_cfg.emu = cfg.emu;
  val_cfg.roi = cfg.roi;

  auto grad_names = model::named_params(params);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::map<std::string, Tensor> grad_sum;
    for (const auto& [name, t] : grad_names) grad_sum.emplace(name, Tensor(t->rows(), t->cols()));
    double total = 0.0, single_total = 0.0, coop_total = 0.0, shared = 0.0;

    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::uint64_t scn_seed = mix_seed(cfg.seed, 0xba7c4 + step * cfg.batch + b);
      const Scenario scn = gen_scenario(scn_seed, cfg.scenario);
      const auto outputs = emulate_all(scn, cfg.emu, mix_seed(scn_seed, 0xe31));

      wire::QueryPayload ego =
          wire::top_k_select(outputs[0].features, outputs[0].centers, outputs[0].scores,
                             cfg.dims.k, scn.agents[0].pose, 0);
      std::vector<wire::QueryPayload> cavs;
      for (std::size_t a = 1; a < scn.agents.size(); ++a)
        cavs.push_back(wire::top_k_select(outputs[a].features, outputs[a].centers,
                                          outputs[a].scores, cfg.dims.k, scn.agents[a].pose,
                                          static_cast<std::uint32_t>(a)));

      ad::Graph g;
      const auto nodes = model::register_model(g, params);
      const auto ag = fusion::align_and_concat_graph(g, ego, cavs, scn.agents[0].pose,
                                                     cfg.mask.max_agents, nodes.mln);
      const Tensor coop_refs = heads::normalize_refs(ag.meta.c_all, cfg.roi);
      const ad::NodeId q_in = g.add(
          ag.q_all, fusion::encode_centers_graph(g, coop_refs, ag.meta.valid, nodes.mln.pos));
      const Tensor additive = fusion::to_additive(fusion::build_combined(ag.meta, cfg.mask));
      const auto layer_ids = fusion::eqformer_graph(g, q_in, additive, nodes.blocks);

      std::vector<ad::NodeId> coop_span = cfg.all_layer_supervision
                                              ? layer_ids
                                              : std::vector<ad::NodeId>{layer_ids.back()};

      const auto gts = gt_boxes(scn);
      std::vector<std::size_t> gt_classes(gts.size(), 0);
      for (std::size_t o = 0; o < scn.objects.size(); ++o)
        gt_classes[o] = scn.objects[o].class_id;

      const ad::NodeId ego_feats =
          g.input(floats_to_tensor(ego.features, ego.k, ego.d));
      const Tensor ego_refs =
          heads::normalize_refs(floats_to_tensor(ego.centers, ego.k, 3), cfg.roi);
      const std::vector<ad::NodeId> single_span{ego_feats};
      const auto sin_stage =
          heads::stage_loss_graph(g, single_span, ego_refs, nodes.sin_head, gts, gt_classes,
                                  cfg.dims.classes, cfg.roi, cfg.weights);
      const auto coop_stage =
          heads::stage_loss_graph(g, coop_span, coop_refs, nodes.co_head, gts, gt_classes,
                                  cfg.dims.classes, cfg.roi, cfg.weights);

      const ad::NodeId loss = g.add(g.scale(sin_stage.total, cfg.weights.w_sin),
                                    g.scale(coop_stage.total, cfg.weights.w_co));
      g.backward(loss);

      total += g.value(loss)(0, 0);
      single_total += g.value(sin_stage.total)(0, 0);
      coop_total += g.value(coop_stage.total)(0, 0);
      const auto& last_term = coop_stage.terms.back();
      shared += cfg.weights.w_sin * g.value(sin_stage.total)(0, 0) +
                cfg.weights.w_co * (last_term.cls + cfg.weights.lambda_reg * last_term.reg);

      for (const auto& [name, id] : model::named_nodes(nodes)) {
        Tensor& acc = grad_sum.at(name);
        const Tensor& gt = g.grad(id);
        for (std::size_t j = 0; j < acc.size(); ++j) acc.data()[j] += gt.data()[j];
      }
    }

    const double inv = 1.0 / static_cast<double>(cfg.batch);
    for (auto& [name, acc] : grad_sum)
      for (std::size_t j = 0; j < acc.size(); ++j) acc.data()[j] *= inv;

    TrainLogEntry entry;
    entry.step = step;
    entry.total = total * inv;
    entry.single_total = single_total * inv;
    entry.coop_total = coop_total * inv;
    entry.shared = shared * inv;

    if (!std::isfinite(entry.total)) {
      if (!cfg.checkpoint_path.empty()) model::save_checkpoint(cfg.checkpoint_path, last_good);
      throw std::runtime_error("train_toy: non-finite loss at step " + std::to_string(step));
    }

    // Warmup then cosine decay to 5%. The box terms are L1, whose gradient
    // magnitude does not shrink near the optimum, so a fixed step size
    // leaves the parameters jittering at the learning-rate scale; decaying
    // removes that endgame noise.
    const std::size_t warm = std::max<std::size_t>(std::size_t{1}, cfg.steps / 20);
    if (step <= warm) {
      opt.cfg.lr = cfg.adam.lr * static_cast<double>(step) / static_cast<double>(warm);
    } else {
      const double progress = static_cast<double>(step - warm) /
                              static_cast<double>(std::max<std::size_t>(std::size_t{1}, cfg.steps - warm));
      opt.cfg.lr =
          cfg.adam.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    }
    model::adam_step(params, grad_sum, opt);
    last_good = params;

    if (cfg.val_every > 0 && step % cfg.val_every == 0 && !cfg.val_seeds.empty()) {
      double ap = 0.0;
      for (std::uint64_t vs : cfg.val_seeds) {
        const Scenario scn = gen_scenario(vs, cfg.scenario);
        ap += run_pipeline(scn, params, val_cfg, mix_seed(vs, 0xea1)).eval.ap50;
      }
      entry.val_ap50 = ap / static_cast<double>(cfg.val_seeds.size());
    }
    result.log.push_back(entry);
  }

  if (!cfg.checkpoint_path.empty()) model::save_checkpoint(cfg.checkpoint_path, params);
  result.params = std::move(params);
  return result;
}

void write_train_log(const std::filesystem::path& path,
                     const std::vector<TrainLogEntry>& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_train_log: cannot open " + path.string());
  for (const auto& e : log) {
    json j{{"step", e.step},
           {"total", e.total},
           {"single", e.single_total},
           {"coop", e.coop_total},
           {"shared", e.shared}};
    if (e.val_ap50 >= 0.0) j["val_ap50"] = e.val_ap50;
    f << j.dump() << "\n";
  }
  if (!f) throw std::runtime_error("write_train_log: write failed for " + path.string());
}

double final_smoothed_shared(const std::vector<TrainLogEntry>& log, std::size_t window) {
  if (log.empty()) throw std::invalid_argument("final_smoothed_shared: empty log");
  const std::size_t n = std::min(window, log.size());
  double sum = 0.0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) sum += log[i].shared;
  return sum / static_cast<double>(n);
}

}  // namespace cqf::sim
