#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cqfuse/fusion.hpp"
#include "cqfuse/heads.hpp"
#include "cqfuse/rng.hpp"

namespace cqf::model {

struct Dims {
  std::size_t d = 32;          // query feature width
  std::size_t n_queries = 64;  // detector queries per agent
  std::size_t k = 8;           // transmitted queries per agent
  std::size_t max_agents = 4;
  std::size_t classes = 1;
  std::size_t heads = 4;
  std::size_t ffn = 64;
  std::size_t mln_hidden = 32;
  std::size_t blocks = 3;
};

struct ModelParams {
  Dims dims;
  fusion::MlnParams mln;
  fusion::EqFormerParams former;
  heads::HeadParams sin_head;  // supervises the raw per-agent stage
  heads::HeadParams co_head;   // shared across the fused layers
};

ModelParams init_model(Rng& rng, const Dims& dims);

// Deterministically ordered name -> tensor registry covering every
// learnable tensor.
std::vector<std::pair<std::string, Tensor*>> named_params(ModelParams& m);

struct ModelNodes {
  fusion::MlnNodes mln;
  std::vector<fusion::BlockNodes> blocks;
  heads::HeadNodes sin_head, co_head;
};

// Registers all tensors as tape parameters, in named_params order.
ModelNodes register_model(ad::Graph& g, const ModelParams& m);

// Node ids in the same order and under the same names as named_params.
std::vector<std::pair<std::string, ad::NodeId>> named_nodes(const ModelNodes& n);

std::map<std::string, Tensor> collect_grads(const ad::Graph& g, const ModelNodes& n);

std::size_t param_count(const ModelParams& m);

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global gradient norm; <= 0 disables clipping
};

struct AdamState {
  AdamConfig cfg;
  std::size_t t = 0;
  std::map<std::string, Tensor> m, v;
};

// One update over all parameters; missing gradient entries are an error.
void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads,
               AdamState& st);

// Binary checkpoint: "CKP1", uint32 manifest length, JSON manifest (dims
// plus per-tensor name/rows/cols/offset), float64 little-endian blob.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& m);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace cqf::model
