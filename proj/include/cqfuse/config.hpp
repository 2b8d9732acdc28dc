#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "cqfuse/fusion.hpp"
#include "cqfuse/heads.hpp"
#include "cqfuse/model.hpp"
#include "cqfuse/sim.hpp"
#include "json.hpp"

namespace cqf::config {

// Invalid or unknown configuration content; path() names the offending
// field as "section.key".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& why)
      : std::runtime_error("config error at '" + path + "': " + why), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Whole-run configuration. The document is strict: unknown keys are
// rejected with their path, missing keys fall back to the defaults below.
// Derived fields (mask.max_agents, emulator width/classes/query count,
// scenario roi and agent budget) mirror dims and are not independently
// configurable.
struct RunConfig {
  model::Dims dims;                 // desk-scale defaults
  fusion::MaskConfig mask;          // tau, theta, gate switches
  sim::EmulatorConfig emu;          // noise model
  sim::ScenarioConfig scenario;     // world generation
  heads::Roi roi;
  heads::LossWeights weights;
  model::AdamConfig adam;

  std::size_t train_steps = 2000;
  std::size_t train_batch = 4;
  bool all_layer_supervision = true;
  std::size_t val_every = 0;

  double score_threshold = 0.20;
  double nms_iou = 0.5;
  bool use_wire = true;
  double comm_range = 70.0;

  std::uint64_t seed = 1;
  std::size_t n_eval_seeds = 20;
  std::uint64_t eval_seed_base = 9000;

  // Derived-field synchronization (dims wins).
  void sync();

  sim::TrainConfig train_config() const;
  sim::PipelineConfig pipeline_config() const;
  std::uint64_t eval_seed(std::size_t i) const { return eval_seed_base + i; }
};

RunConfig default_config();

RunConfig from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

RunConfig load(const std::filesystem::path& path);
void save(const std::filesystem::path& path, const RunConfig& c);

}  // namespace cqf::config
