#include "cqfuse/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace cqf::config {

namespace {

using json = nlohmann::json;

// Reads one strict object section: every present key must be consumed by
// `fields`, every value must have the right JSON type.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key, "wrong type");
    }
  }

  // Double that also accepts the string "inf".
  void get_inf(const char* key, double& out) {
    used_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (it->is_string()) {
      if (it->get<std::string>() == "inf") {
        out = std::numeric_limits<double>::infinity();
        return;
      }
      throw ConfigError(path_ + "." + key, "expected a number or \"inf\"");
    }
    try {
      out = it->get<double>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key, "wrong type");
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      bool known = false;
      for (const auto& u : used_)
        if (u == key) known = true;
      if (!known) throw ConfigError(path_ + "." + key, "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> used_;
};

void parse_vec3(const json& j, const std::string& path, Vec3& out) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(path, "expected [x, y, z]");
  try {
    out = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
  } catch (const json::exception&) {
    throw ConfigError(path, "wrong type");
  }
}

json inf_or_number(double v) {
  if (std::isinf(v)) return json("inf");
  return json(v);
}

}  // namespace

void RunConfig::sync() {
  mask.max_agents = dims.max_agents;
  emu.d = dims.d;
  emu.classes = dims.classes;
  emu.n_queries = dims.n_queries;
  scenario.max_agents = dims.max_agents;
  scenario.n_cavs = dims.max_agents - 1;
  scenario.roi = roi;
}

sim::TrainConfig RunConfig::train_config() const {
  sim::TrainConfig t;
  t.seed = seed;
  t.steps = train_steps;
  t.batch = train_batch;
  t.dims = dims;
  t.adam = adam;
  t.scenario = scenario;
  t.emu = emu;
  t.mask = mask;
  t.weights = weights;
  t.roi = roi;
  t.score_threshold = score_threshold;
  t.all_layer_supervision = all_layer_supervision;
  t.val_every = val_every;
  if (val_every > 0)
    for (std::size_t i = 0; i < 5; ++i) t.val_seeds.push_back(eval_seed_base + 100000 + i);
  return t;
}

sim::PipelineConfig RunConfig::pipeline_config() const {
  sim::PipelineConfig p;
  p.k = dims.k;
  p.mask = mask;
  p.score_threshold = score_threshold;
  p.nms_iou = nms_iou;
  p.use_wire = use_wire;
  p.comm_range = comm_range;
  p.emu = emu;
  p.roi = roi;
  return p;
}

RunConfig default_config() {
  RunConfig c;
  c.sync();
  return c;
}

RunConfig from_json(const nlohmann::json& j) {
  RunConfig c;
  if (!j.is_object()) throw ConfigError("<root>", "expected an object");

  static const char* kSections[] = {"dims", "mask",  "emulator", "scenario", "roi",
                                    "loss", "adam",  "train",    "pipeline", "eval",
                                    "seed"};
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* s : kSections)
      if (key == s) known = true;
    if (!known) throw ConfigError(key, "unknown key");
  }

  if (j.contains("dims")) {
    Section s(j["dims"], "dims");
    s.get("d", c.dims.d);
    s.get("n_queries", c.dims.n_queries);
    s.get("k", c.dims.k);
    s.get("max_agents", c.dims.max_agents);
    s.get("classes", c.dims.classes);
    s.get("heads", c.dims.heads);
    s.get("ffn", c.dims.ffn);
    s.get("mln_hidden", c.dims.mln_hidden);
    s.get("blocks", c.dims.blocks);
    s.finish();
  }
  if (j.contains("mask")) {
    Section s(j["mask"], "mask");
    s.get_inf("tau", c.mask.tau);
    s.get("theta", c.mask.theta);
    s.get("use_qsm", c.mask.use_qsm);
    s.get("use_pcm", c.mask.use_pcm);
    s.get("use_ssm", c.mask.use_ssm);
    s.finish();
  }
  if (j.contains("emulator")) {
    Section s(j["emulator"], "emulator");
    s.get("sigma_center", c.emu.sigma_center);
    s.get("sigma_center_growth", c.emu.sigma_center_growth);
    s.get("sigma_z", c.emu.sigma_z);
    s.get("sigma_yaw", c.emu.sigma_yaw);
    s.get("sigma_size", c.emu.sigma_size);
    s.get("sigma_feature", c.emu.sigma_feature);
    s.get("score_floor", c.emu.score_floor);
    s.get("background_cap", c.emu.background_cap);
    s.get("embed_seed", c.emu.embed_seed);
    s.finish();
  }
  if (j.contains("scenario")) {
    Section s(j["scenario"], "scenario");
    s.get("min_objects", c.scenario.min_objects);
    s.get("max_objects", c.scenario.max_objects);
    s.get("cav_ring_min", c.scenario.cav_ring_min);
    s.get("cav_ring_max", c.scenario.cav_ring_max);
    s.get("sensing_min", c.scenario.sensing_min);
    s.get("sensing_max", c.scenario.sensing_max);
    s.get("ego_sensing_min", c.scenario.ego_sensing_min);
    s.get("ego_sensing_max", c.scenario.ego_sensing_max);
    s.get("occlusion_fraction", c.scenario.occlusion_fraction);
    s.get("min_spacing", c.scenario.min_spacing);
    s.finish();
  }
  if (j.contains("roi")) {
    const json& r = j["roi"];
    if (!r.is_object()) throw ConfigError("roi", "expected an object");
    for (const auto& [key, value] : r.items()) {
      if (key == "min")
        parse_vec3(value, "roi.min", c.roi.min_pt);
      else if (key == "max")
        parse_vec3(value, "roi.max", c.roi.max_pt);
      else
        throw ConfigError("roi." + key, "unknown key");
    }
  }
  if (j.contains("loss")) {
    Section s(j["loss"], "loss");
    s.get("w_sin", c.weights.w_sin);
    s.get("w_co", c.weights.w_co);
    s.get("lambda_reg", c.weights.lambda_reg);
    s.get("w_cls", c.weights.w_cls);
    s.get("w_box", c.weights.w_box);
    s.finish();
  }
  if (j.contains("adam")) {
    Section s(j["adam"], "adam");
    s.get("lr", c.adam.lr);
    s.get("beta1", c.adam.beta1);
    s.get("beta2", c.adam.beta2);
    s.get("eps", c.adam.eps);
    s.get("clip_norm", c.adam.clip_norm);
    s.finish();
  }
  if (j.contains("train")) {
    Section s(j["train"], "train");
    s.get("steps", c.train_steps);
    s.get("batch", c.train_batch);
    s.get("all_layer_supervision", c.all_layer_supervision);
    s.get("val_every", c.val_every);
    s.finish();
  }
  if (j.contains("pipeline")) {
    Section s(j["pipeline"], "pipeline");
    s.get("score_threshold", c.score_threshold);
    s.get("nms_iou", c.nms_iou);
    s.get("use_wire", c.use_wire);
    s.get("comm_range", c.comm_range);
    s.finish();
  }
  if (j.contains("eval")) {
    Section s(j["eval"], "eval");
    s.get("n_seeds", c.n_eval_seeds);
    s.get("seed_base", c.eval_seed_base);
    s.finish();
  }
  if (j.contains("seed")) {
    try {
      c.seed = j["seed"].get<std::uint64_t>();
    } catch (const json::exception&) {
      throw ConfigError("seed", "wrong type");
    }
  }

  if (c.dims.k > c.dims.n_queries) throw ConfigError("dims.k", "k exceeds n_queries");
  if (c.dims.max_agents == 0) throw ConfigError("dims.max_agents", "must be positive");
  if (c.dims.heads == 0 || c.dims.d % c.dims.heads != 0)
    throw ConfigError("dims.heads", "must divide d");
  if (!(c.mask.theta >= 0.0 && c.mask.theta < 1.0))
    throw ConfigError("mask.theta", "must be in [0, 1)");
  if (!(c.mask.tau >= 0.0)) throw ConfigError("mask.tau", "must be nonnegative");
  if (c.roi.min_pt.x >= c.roi.max_pt.x || c.roi.min_pt.y >= c.roi.max_pt.y ||
      c.roi.min_pt.z >= c.roi.max_pt.z)
    throw ConfigError("roi", "min must be below max on every axis");
  c.sync();
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  json j;
  j["dims"] = {{"d", c.dims.d},
               {"n_queries", c.dims.n_queries},
               {"k", c.dims.k},
               {"max_agents", c.dims.max_agents},
               {"classes", c.dims.classes},
               {"heads", c.dims.heads},
               {"ffn", c.dims.ffn},
               {"mln_hidden", c.dims.mln_hidden},
               {"blocks", c.dims.blocks}};
  j["mask"] = {{"tau", inf_or_number(c.mask.tau)},
               {"theta", c.mask.theta},
               {"use_qsm", c.mask.use_qsm},
               {"use_pcm", c.mask.use_pcm},
               {"use_ssm", c.mask.use_ssm}};
  j["emulator"] = {{"sigma_center", c.emu.sigma_center},
                   {"sigma_center_growth", c.emu.sigma_center_growth},
                   {"sigma_z", c.emu.sigma_z},
                   {"sigma_yaw", c.emu.sigma_yaw},
                   {"sigma_size", c.emu.sigma_size},
                   {"sigma_feature", c.emu.sigma_feature},
                   {"score_floor", c.emu.score_floor},
                   {"background_cap", c.emu.background_cap},
                   {"embed_seed", c.emu.embed_seed}};
  j["scenario"] = {{"min_objects", c.scenario.min_objects},
                   {"max_objects", c.scenario.max_objects},
                   {"cav_ring_min", c.scenario.cav_ring_min},
                   {"cav_ring_max", c.scenario.cav_ring_max},
                   {"sensing_min", c.scenario.sensing_min},
                   {"sensing_max", c.scenario.sensing_max},
                   {"ego_sensing_min", c.scenario.ego_sensing_min},
                   {"ego_sensing_max", c.scenario.ego_sensing_max},
                   {"occlusion_fraction", c.scenario.occlusion_fraction},
                   {"min_spacing", c.scenario.min_spacing}};
  j["roi"] = {{"min", {c.roi.min_pt.x, c.roi.min_pt.y, c.roi.min_pt.z}},
              {"max", {c.roi.max_pt.x, c.roi.max_pt.y, c.roi.max_pt.z}}};
  j["loss"] = {{"w_sin", c.weights.w_sin},
               {"w_co", c.weights.w_co},
               {"lambda_reg", c.weights.lambda_reg},
               {"w_cls", c.weights.w_cls},
               {"w_box", c.weights.w_box}};
  j["adam"] = {{"lr", c.adam.lr},
               {"beta1", c.adam.beta1},
               {"beta2", c.adam.beta2},
               {"eps", c.adam.eps},
               {"clip_norm", c.adam.clip_norm}};
  j["train"] = {{"steps", c.train_steps},
                {"batch", c.train_batch},
                {"all_layer_supervision", c.all_layer_supervision},
                {"val_every", c.val_every}};
  j["pipeline"] = {{"score_threshold", c.score_threshold},
                   {"nms_iou", c.nms_iou},
                   {"use_wire", c.use_wire},
                   {"comm_range", c.comm_range}};
  j["eval"] = {{"n_seeds", c.n_eval_seeds}, {"seed_base", c.eval_seed_base}};
  j["seed"] = c.seed;
  return j;
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string(), "cannot open file");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  return from_json(j);
}

void save(const std::filesystem::path& path, const RunConfig& c) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("config save: cannot open " + tmp.string());
    f << to_json(c).dump(2) << "\n";
    if (!f) throw std::runtime_error("config save: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace cqf::config
