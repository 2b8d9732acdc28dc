#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "cqfuse/fusion.hpp"
#include "cqfuse/geometry.hpp"
#include "cqfuse/heads.hpp"
#include "cqfuse/model.hpp"
#include "cqfuse/rng.hpp"
#include "cqfuse/wire.hpp"

namespace cqf::sim {

inline constexpr std::size_t kTagDim = 8;
// Attribute vector: normalized center (3), log sizes (3), sin/cos yaw,
// identity tag.
inline constexpr std::size_t kAttrDim = 8 + kTagDim;

struct SimObject {
  BBox3D box;
  std::size_t class_id = 0;
  std::vector<double> tag;  // kTagDim random identity values
};

struct Agent {
  Pose pose;  // agent frame -> world frame; agents[0] (ego) is identity
  double sensing_range = 30.0;
};

struct Scenario {
  std::vector<SimObject> objects;
  std::vector<Agent> agents;  // ego first
  // visible[a][o]: object o yields a query for agent a (range gate, and
  // for the ego also the occlusion coin).
  std::vector<std::vector<std::uint8_t>> visible;
  heads::Roi roi;
  std::uint64_t seed = 0;
};

struct ScenarioConfig {
  std::size_t min_objects = 3, max_objects = 7;
  std::size_t n_cavs = 3;
  double cav_ring_min = 18.0, cav_ring_max = 42.0;
  double sensing_min = 26.0, sensing_max = 34.0;
  double ego_sensing_min = 26.0, ego_sensing_max = 34.0;
  // An object inside the ego's range that some CAV also covers is dropped
  // from the ego's view with this probability (the collaboration payoff
  // case: the ego must rely on the CAV's queries for it).
  double occlusion_fraction = 0.5;
  double min_spacing = 14.0;  // BEV center-to-center object spacing
  heads::Roi roi;
  std::size_t max_agents = 4;  // including ego
};

// Deterministic in (seed, cfg). Every object lies inside the roi, is
// spaced at least min_spacing from its peers, and is visible to at least
// one agent. Throws after bounded rejection retries when the requested
// density cannot be placed.
Scenario gen_scenario(std::uint64_t seed, const ScenarioConfig& cfg);

// Versioned structured dump for golden tests; round-trips exactly.
void dump_scenario(const std::filesystem::path& path, const Scenario& s);
Scenario load_scenario(const std::filesystem::path& path);

struct EmulatorConfig {
  std::size_t n_queries = 64;
  std::size_t d = 32;
  std::size_t classes = 1;
  double sigma_center = 0.35;         // meters, at zero distance
  double sigma_center_growth = 1.0;   // extra sigma factor at full range
  double sigma_z = 0.10;              // vertical noise, meters
  double sigma_yaw = 0.05;            // radians
  double sigma_size = 0.03;           // relative
  double sigma_feature = 0.02;        // added to the embedded feature
  double score_floor = 0.30;          // visible score at the range edge
  double background_cap = 0.15;       // background scores in (0.02, cap]
  std::uint64_t embed_seed = 0x5eedf00dULL;
};

// Fixed random projection (d x kAttrDim) shared by every agent; the same
// seed must be used for training and evaluation.
Tensor embedding_matrix(std::size_t d, std::uint64_t embed_seed);

struct DetectorOutput {
  Tensor features;  // n_queries x d
  Tensor centers;   // n_queries x 3, agent frame
  Tensor scores;    // n_queries x classes
  // Bookkeeping (not transmitted): source object per query (-1 for
  // background) and the measured box per query in the agent frame.
  std::vector<int> query_object;
  std::vector<BBox3D> boxes;
};

// One agent's emulated stage-1 detector: each visible object yields one
// query whose feature embeds the *measured* attributes (noisy center,
// sizes, yaw), so several agents' queries about one object are noisy
// views of the same underlying vector; remaining queries are background.
DetectorOutput emulate_detector(const Scenario& scn, std::size_t agent_idx,
                                const EmulatorConfig& cfg, Rng& rng);

// emulate_detector over every agent with independent per-agent streams.
std::vector<DetectorOutput> emulate_all(const Scenario& scn, const EmulatorConfig& cfg,
                                        std::uint64_t seed);

// Greedy score-ordered BEV-IoU duplicate suppression.
std::vector<heads::Detection> suppress_duplicates(std::vector<heads::Detection> dets,
                                                  double iou_thr);

// Sort by score descending, greedily match to the best unmatched ground
// truth with IoU >= thr, then integrate the all-point-interpolated PR
// curve. Empty gts: 1 with no detections, else 0.
double eval_ap(const std::vector<heads::Detection>& dets, const std::vector<BBox3D>& gts,
               double iou_thr);
std::vector<std::pair<double, double>> pr_curve(const std::vector<heads::Detection>& dets,
                                                const std::vector<BBox3D>& gts,
                                                double iou_thr);

struct EvalResult {
  double ap50 = 0.0;
  double ap70 = 0.0;
  std::vector<std::pair<double, double>> pr50;
  std::uint64_t bandwidth_bits = 0;
};

struct PipelineConfig {
  std::size_t k = 8;                // queries each CAV transmits
  // Ego-side query budget for the fused sequence. The ego does not
  // transmit, so sweeping k (the bandwidth knob) should not shrink its own
  // candidate set; 0 means "same as k".
  std::size_t ego_k = 0;
  fusion::MaskConfig mask;          // tau, theta, max_agents
  double score_threshold = 0.20;
  double nms_iou = 0.5;
  bool use_wire = true;             // serialize + deserialize CAV payloads
  double comm_range = 70.0;         // center-to-center CAV -> ego gate
  // Number of CAVs allowed to transmit (SIZE_MAX = all); 0 gives the
  // ego-only path with zero bandwidth.
  std::size_t use_cavs = std::numeric_limits<std::size_t>::max();
  EmulatorConfig emu;
  heads::Roi roi;
};

struct PipelineResult {
  std::vector<heads::Detection> detections;  // ego frame
  EvalResult eval;
};

// Full cooperative chain: emulate -> top-k -> (wire) -> align -> fuse ->
// head -> threshold -> suppression -> AP against the scenario objects.
// Detection candidates are valid slots whose transmitted score clears the
// score-mask gate (strictly above theta); the head's own score is then
// thresholded at score_threshold.
PipelineResult run_pipeline(const Scenario& scn, const model::ModelParams& m,
                            const PipelineConfig& cfg, std::uint64_t seed);
// Same, over precomputed detector outputs (shared across baselines).
PipelineResult run_pipeline_on(const Scenario& scn, std::span<const DetectorOutput> outputs,
                               const model::ModelParams& m, const PipelineConfig& cfg);

struct LateFusionResult {
  std::vector<heads::Detection> detections;
  std::uint64_t bandwidth_bits = 0;
};

// Box-sharing baseline: every agent keeps its own measurements above the
// score threshold, boxes are moved into the ego frame, and duplicates are
// suppressed. Bandwidth counts 8 float32 values per shared CAV box.
LateFusionResult late_fusion_baseline(const Scenario& scn,
                                      std::span<const DetectorOutput> outputs,
                                      const PipelineConfig& cfg);

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  model::Dims dims;
  model::AdamConfig adam;
  ScenarioConfig scenario;
  EmulatorConfig emu;
  fusion::MaskConfig mask;
  heads::LossWeights weights;
  heads::Roi roi;
  double score_threshold = 0.20;
  bool all_layer_supervision = true;  // false: final fused layer only
  std::size_t val_every = 0;          // 0 disables periodic validation
  std::vector<std::uint64_t> val_seeds;
  std::filesystem::path checkpoint_path;  // empty: do not write
};

struct TrainLogEntry {
  std::size_t step = 0;
  double total = 0.0;        // optimized objective
  double single_total = 0.0;
  double coop_total = 0.0;
  // Comparable across supervision variants: w_sin * single stage +
  // w_co * (final fused layer cls + lambda * reg).
  double shared = 0.0;
  double val_ap50 = -1.0;    // -1 when not measured this step
};

struct TrainResult {
  model::ModelParams params;
  std::vector<TrainLogEntry> log;
};

// Stochastic first-order training of MLN + fusion blocks + heads on
// generated scenarios. adam.lr is the peak rate of a 5%-of-steps warmup
// followed by cosine decay to 5%. Deterministic in cfg. A non-finite loss
// raises after writing the last finite-loss parameters to checkpoint_path.
TrainResult train_toy(const TrainConfig& cfg);

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogEntry>& log);

// Trailing-window mean of the shared metric at the end of the log.
double final_smoothed_shared(const std::vector<TrainLogEntry>& log, std::size_t window = 50);

}  // namespace cqf::sim
