#include "cqfuse/wire.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace cqf::wire {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const std::uint8_t* p) {
  const std::uint32_t bits = get_u32(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::vector<float> quantize(const Tensor& t) {
  std::vector<float> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t.data()[i]);
  return out;
}

}  // namespace

Transform QueryPayload::pose_transform() const {
  std::array<double, 16> m;
  for (int i = 0; i < 16; ++i) m[i] = static_cast<double>(pose[i]);
  return Transform(m);
}

QueryPayload make_payload(const Tensor& features, const Tensor& centers,
                          const Tensor& scores, const Pose& pose, std::uint32_t agent_id) {
  const std::size_t n = features.rows();
  if (centers.rows() != n || scores.rows() != n)
    throw std::invalid_argument("make_payload: row count mismatch");
  if (centers.cols() != 3) throw std::invalid_argument("make_payload: centers must be n x 3");
  if (n > 0xffff || features.cols() > 0xffff || scores.cols() > 0xffff)
    throw std::invalid_argument("make_payload: dimension exceeds uint16");

  QueryPayload p;
  p.agent_id = agent_id;
  p.k = static_cast<std::uint16_t>(n);
  p.d = static_cast<std::uint16_t>(features.cols());
  p.c = static_cast<std::uint16_t>(scores.cols());
  p.features = quantize(features);
  p.centers = quantize(centers);
  p.scores = quantize(scores);
  const auto& m = Transform::from_pose(pose).flat();
  for (int i = 0; i < 16; ++i) p.pose[i] = static_cast<float>(m[i]);
  return p;
}

QueryPayload top_k_select(const Tensor& features, const Tensor& centers,
                          const Tensor& scores, std::size_t k, const Pose& pose,
                          std::uint32_t agent_id) {
  const std::size_t n = features.rows();
  if (k > n) throw std::invalid_argument("top_k_select: k exceeds row count");
  if (centers.rows() != n || scores.rows() != n)
    throw std::invalid_argument("top_k_select: row count mismatch");

  std::vector<double> key(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = scores(i, 0);
    for (std::size_t c = 1; c < scores.cols(); ++c) m = std::max(m, scores(i, c));
    key[i] = m;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (key[a] != key[b]) return key[a] > key[b];
    return a < b;  // stable tie: lower index wins
  });
  order.resize(k);

  Tensor fq(k, features.cols()), cq(k, 3), sq(k, scores.cols());
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < features.cols(); ++j) fq(i, j) = features(order[i], j);
    for (std::size_t j = 0; j < 3; ++j) cq(i, j) = centers(order[i], j);
    for (std::size_t j = 0; j < scores.cols(); ++j) sq(i, j) = scores(order[i], j);
  }
  return make_payload(fq, cq, sq, pose, agent_id);
}

WireFrame serialize(const QueryPayload& p) {
  WireFrame f;
  f.bytes.reserve(frame_size_bytes(p.k, p.d, p.c));
  for (std::uint8_t b : kMagic) f.bytes.push_back(b);
  put_u16(f.bytes, kVersion);
  put_u32(f.bytes, p.agent_id);
  put_u16(f.bytes, p.k);
  put_u16(f.bytes, p.d);
  put_u16(f.bytes, p.c);
  for (float v : p.features) put_f32(f.bytes, v);
  for (float v : p.centers) put_f32(f.bytes, v);
  for (float v : p.scores) put_f32(f.bytes, v);
  for (float v : p.pose) put_f32(f.bytes, v);
  return f;
}

QueryPayload deserialize(const WireFrame& f) {
  const auto& b = f.bytes;
  if (b.size() < kHeaderBytes)
    throw DecodeError("length", "frame shorter than the 16-byte header");
  if (!std::equal(kMagic.begin(), kMagic.end(), b.begin()))
    throw DecodeError("magic", "expected CQF1");
  const std::uint16_t version = get_u16(b.data() + 4);
  if (version != kVersion)
    throw DecodeError("version", "unsupported version " + std::to_string(version));

  QueryPayload p;
  p.agent_id = get_u32(b.data() + 6);
  p.k = get_u16(b.data() + 10);
  p.d = get_u16(b.data() + 12);
  p.c = get_u16(b.data() + 14);

  const std::uint64_t want = frame_size_bytes(p.k, p.d, p.c);
  if (b.size() != want)
    throw DecodeError("length", "expected " + std::to_string(want) + " bytes, got " +
                                    std::to_string(b.size()));

  const std::uint8_t* cur = b.data() + kHeaderBytes;
  auto read_block = [&](std::vector<float>& dst, std::size_t count) {
    dst.resize(count);
    for (std::size_t i = 0; i < count; ++i, cur += 4) dst[i] = get_f32(cur);
  };
  read_block(p.features, std::size_t{p.k} * p.d);
  read_block(p.centers, std::size_t{p.k} * 3);
  read_block(p.scores, std::size_t{p.k} * p.c);
  for (int i = 0; i < 16; ++i, cur += 4) p.pose[i] = get_f32(cur);
  return p;
}

std::uint64_t frame_size_bytes(std::uint64_t k, std::uint64_t d, std::uint64_t c) {
  return kHeaderBytes + 4 * (k * (d + 3 + c) + 16);
}

std::uint64_t bandwidth_bits(std::uint64_t k, std::uint64_t d, std::uint64_t c) {
  return k * (d + 3 + c) * 32;
}

std::string format_megabits(std::uint64_t bits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(bits) / 1e6);
  return buf;
}

void dump_frame(const std::filesystem::path& path, const WireFrame& f) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("dump_frame: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(f.bytes.data()),
            static_cast<std::streamsize>(f.bytes.size()));
  if (!out) throw std::runtime_error("dump_frame: short write to " + path.string());
}

WireFrame load_frame(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_frame: cannot open " + path.string());
  WireFrame f;
  f.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return f;
}

}  // namespace cqf::wire
