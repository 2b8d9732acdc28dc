#include "cqfuse/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <system_error>

#include "json.hpp"

namespace cqf::model {

namespace {

using json = nlohmann::json;

// Both registries below are produced by the same call sequence so that
// named_params and named_nodes stay index-aligned; a swap would show up as
// a value mismatch in the tests that compare the two.
template <typename Out, typename W, typename B>
void push_pair(Out& out, const std::string& base, W w, B b) {
  out.emplace_back(base + ".w", w);
  out.emplace_back(base + ".b", b);
}

template <typename Out, typename G, typename B>
void push_norm(Out& out, const std::string& base, G g, B b) {
  out.emplace_back(base + ".g", g);
  out.emplace_back(base + ".b", b);
}

std::string block_base(std::size_t i) { return "former.b" + std::to_string(i); }

}  // namespace

ModelParams init_model(Rng& rng, const Dims& dims) {
  if (dims.d == 0 || dims.k == 0 || dims.max_agents == 0 || dims.classes == 0)
    throw std::invalid_argument("init_model: dims must be positive");
  if (dims.n_queries < dims.k)
    throw std::invalid_argument("init_model: n_queries must be >= k");
  ModelParams m;
  m.dims = dims;
  m.mln = fusion::init_mln(rng, dims.d, dims.mln_hidden);
  m.former = fusion::init_eqformer(rng, dims.d, dims.heads, dims.ffn, dims.blocks);
  m.sin_head = heads::init_head(rng, dims.d, dims.classes);
  m.co_head = heads::init_head(rng, dims.d, dims.classes);
  return m;
}

std::vector<std::pair<std::string, Tensor*>> named_params(ModelParams& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  push_pair(out, "mln.enc1", &m.mln.enc1.weight, &m.mln.enc1.bias);
  push_pair(out, "mln.enc2", &m.mln.enc2.weight, &m.mln.enc2.bias);
  push_norm(out, "mln.norm", &m.mln.norm.gamma, &m.mln.norm.beta);
  out.emplace_back("mln.pos", &m.mln.pos);
  for (std::size_t i = 0; i < m.former.blocks.size(); ++i) {
    auto& b = m.former.blocks[i];
    const std::string base = block_base(i);
    push_pair(out, base + ".wq", &b.attn.wq.weight, &b.attn.wq.bias);
    push_pair(out, base + ".wk", &b.attn.wk.weight, &b.attn.wk.bias);
    push_pair(out, base + ".wv", &b.attn.wv.weight, &b.attn.wv.bias);
    push_pair(out, base + ".wo", &b.attn.wo.weight, &b.attn.wo.bias);
    push_norm(out, base + ".ln1", &b.ln1.gamma, &b.ln1.beta);
    push_norm(out, base + ".ln2", &b.ln2.gamma, &b.ln2.beta);
    push_pair(out, base + ".ffn1", &b.ffn1.weight, &b.ffn1.bias);
    push_pair(out, base + ".ffn2", &b.ffn2.weight, &b.ffn2.bias);
  }
  for (auto [prefix, head] : {std::pair<const char*, heads::HeadParams*>{"sin", &m.sin_head},
                              {"co", &m.co_head}}) {
    const std::string base(prefix);
    push_pair(out, base + ".reg1", &head->reg1.weight, &head->reg1.bias);
    push_pair(out, base + ".reg2", &head->reg2.weight, &head->reg2.bias);
    push_pair(out, base + ".cls1", &head->cls1.weight, &head->cls1.bias);
    push_pair(out, base + ".cls2", &head->cls2.weight, &head->cls2.bias);
  }
  return out;
}

ModelNodes register_model(ad::Graph& g, const ModelParams& m) {
  ModelNodes n;
  n.mln = fusion::register_mln(g, m.mln);
  n.blocks = fusion::register_eqformer(g, m.former);
  n.sin_head = heads::register_head(g, m.sin_head);
  n.co_head = heads::register_head(g, m.co_head);
  return n;
}

std::vector<std::pair<std::string, ad::NodeId>> named_nodes(const ModelNodes& n) {
  std::vector<std::pair<std::string, ad::NodeId>> out;
  push_pair(out, "mln.enc1", n.mln.enc1_w, n.mln.enc1_b);
  push_pair(out, "mln.enc2", n.mln.enc2_w, n.mln.enc2_b);
  push_norm(out, "mln.norm", n.mln.gamma, n.mln.beta);
  out.emplace_back("mln.pos", n.mln.pos);
  for (std::size_t i = 0; i < n.blocks.size(); ++i) {
    const auto& b = n.blocks[i];
    const std::string base = block_base(i);
    push_pair(out, base + ".wq", b.attn.wq_w, b.attn.wq_b);
    push_pair(out, base + ".wk", b.attn.wk_w, b.attn.wk_b);
    push_pair(out, base + ".wv", b.attn.wv_w, b.attn.wv_b);
    push_pair(out, base + ".wo", b.attn.wo_w, b.attn.wo_b);
    push_norm(out, base + ".ln1", b.ln1_g, b.ln1_b);
    push_norm(out, base + ".ln2", b.ln2_g, b.ln2_b);
    push_pair(out, base + ".ffn1", b.ffn1_w, b.ffn1_b);
    push_pair(out, base + ".ffn2", b.ffn2_w, b.ffn2_b);
  }
  for (auto [prefix, head] : {std::pair<const char*, const heads::HeadNodes*>{"sin", &n.sin_head},
                              {"co", &n.co_head}}) {
    const std::string base(prefix);
    push_pair(out, base + ".reg1", head->reg1_w, head->reg1_b);
    push_pair(out, base + ".reg2", head->reg2_w, head->reg2_b);
    push_pair(out, base + ".cls1", head->cls1_w, head->cls1_b);
    push_pair(out, base + ".cls2", head->cls2_w, head->cls2_b);
  }
  return out;
}

std::map<std::string, Tensor> collect_grads(const ad::Graph& g, const ModelNodes& n) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : named_nodes(n)) out.emplace(name, g.grad(id));
  return out;
}

std::size_t param_count(const ModelParams& m) {
  std::size_t total = 0;
  for (const auto& [name, t] : named_params(const_cast<ModelParams&>(m))) total += t->size();
  return total;
}

void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads,
               AdamState& st) {
  auto named = named_params(params);
  std::vector<const Tensor*> g(named.size());
  double sq_norm = 0.0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto it = grads.find(named[i].first);
    if (it == grads.end())
      throw std::invalid_argument("adam_step: missing gradient for '" + named[i].first + "'");
    check_same_shape(it->second, *named[i].second, "adam_step");
    g[i] = &it->second;
    for (std::size_t j = 0; j < it->second.size(); ++j) {
      const double v = it->second.data()[j];
      if (!std::isfinite(v))
        throw std::runtime_error("adam_step: non-finite gradient in '" + named[i].first + "'");
      sq_norm += v * v;
    }
  }
  double scale = 1.0;
  if (st.cfg.clip_norm > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > st.cfg.clip_norm) scale = st.cfg.clip_norm / norm;
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor& p = *named[i].second;
    Tensor& m1 = st.m.try_emplace(named[i].first, Tensor(p.rows(), p.cols())).first->second;
    Tensor& m2 = st.v.try_emplace(named[i].first, Tensor(p.rows(), p.cols())).first->second;
    check_same_shape(m1, p, "adam_step moment");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[i]->data()[j] * scale;
      m1.data()[j] = st.cfg.beta1 * m1.data()[j] + (1.0 - st.cfg.beta1) * gj;
      m2.data()[j] = st.cfg.beta2 * m2.data()[j] + (1.0 - st.cfg.beta2) * gj * gj;
      const double mhat = m1.data()[j] / bc1;
      const double vhat = m2.data()[j] / bc2;
      p.data()[j] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
    }
  }
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

double get_f64(const std::string& in, std::size_t off) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

constexpr char kMagic[4] = {'C', 'K', 'P', '1'};

json dims_to_json(const Dims& d) {
  return json{{"d", d.d},
              {"n_queries", d.n_queries},
              {"k", d.k},
              {"max_agents", d.max_agents},
              {"classes", d.classes},
              {"heads", d.heads},
              {"ffn", d.ffn},
              {"mln_hidden", d.mln_hidden},
              {"blocks", d.blocks}};
}

Dims dims_from_json(const json& j) {
  Dims d;
  d.d = j.at("d").get<std::size_t>();
  d.n_queries = j.at("n_queries").get<std::size_t>();
  d.k = j.at("k").get<std::size_t>();
  d.max_agents = j.at("max_agents").get<std::size_t>();
  d.classes = j.at("classes").get<std::size_t>();
  d.heads = j.at("heads").get<std::size_t>();
  d.ffn = j.at("ffn").get<std::size_t>();
  d.mln_hidden = j.at("mln_hidden").get<std::size_t>();
  d.blocks = j.at("blocks").get<std::size_t>();
  return d;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& m) {
  auto named = named_params(const_cast<ModelParams&>(m));
  std::sort(named.begin(), named.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  std::string blob;
  json tensors = json::array();
  for (const auto& [name, t] : named) {
    tensors.push_back(
        {{"name", name}, {"rows", t->rows()}, {"cols", t->cols()}, {"offset", blob.size()}});
    for (std::size_t j = 0; j < t->size(); ++j) put_f64(blob, t->data()[j]);
  }
  const std::string manifest = json{{"dims", dims_to_json(m.dims)}, {"tensors", tensors}}.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  out += manifest;
  out += blob;

  // Write-then-rename so a crash mid-write never leaves a torn checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (raw.size() < 8 || std::memcmp(raw.data(), kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  const std::uint32_t mlen = get_u32(raw, 4);
  if (raw.size() < 8 + static_cast<std::size_t>(mlen))
    throw std::runtime_error("load_checkpoint: truncated manifest in " + path.string());
  const json manifest = json::parse(raw.substr(8, mlen));

  Rng scratch(0);  // shapes only; every value is overwritten below
  ModelParams m = init_model(scratch, dims_from_json(manifest.at("dims")));
  auto named = named_params(m);
  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : named) by_name.emplace(name, t);

  const std::size_t blob0 = 8 + mlen;
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != named.size())
    throw std::runtime_error("load_checkpoint: tensor count mismatch in " + path.string());
  for (const auto& entry : tensors) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_checkpoint: unknown tensor '" + name + "'");
    Tensor& t = *it->second;
    if (entry.at("rows").get<std::size_t>() != t.rows() ||
        entry.at("cols").get<std::size_t>() != t.cols())
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
    const std::size_t off = blob0 + entry.at("offset").get<std::size_t>();
    if (off + 8 * t.size() > raw.size())
      throw std::runtime_error("load_checkpoint: truncated data for '" + name + "'");
    for (std::size_t j = 0; j < t.size(); ++j) t.data()[j] = get_f64(raw, off + 8 * j);
  }
  return m;
}

}  // namespace cqf::model
