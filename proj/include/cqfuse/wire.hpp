#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cqfuse/geometry.hpp"
#include "cqfuse/tensor.hpp"

namespace cqf::wire {

inline constexpr std::array<std::uint8_t, 4> kMagic{'C', 'Q', 'F', '1'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 16;

// Raised on malformed frames; names the offending field ("magic",
// "version", "length").
class DecodeError : public std::runtime_error {
 public:
  DecodeError(std::string field, const std::string& why)
      : std::runtime_error("decode error in '" + field + "': " + why),
        field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// One agent's transmitted unit: k query feature rows with their centers
// and class scores, plus the sender pose. Everything is float32; the pose
// is quantized here, at construction, so that serialization is a pure
// bit-copy and inserting the byte stage can never change downstream math.
struct QueryPayload {
  std::uint32_t agent_id = 0;
  std::uint16_t k = 0, d = 0, c = 0;
  std::vector<float> features;      // k*d row-major
  std::vector<float> centers;       // k*3, sender frame
  std::vector<float> scores;        // k*c
  std::array<float, 16> pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  Transform pose_transform() const;  // widened to double, validated

  bool operator==(const QueryPayload&) const = default;
};

struct WireFrame {
  std::vector<std::uint8_t> bytes;
};

// Validates shapes (centers n x 3, scores n x c, dims fit in uint16) and
// quantizes everything to float32.
QueryPayload make_payload(const Tensor& features, const Tensor& centers,
                          const Tensor& scores, const Pose& pose, std::uint32_t agent_id);

// Keeps the k rows with the largest per-row max class score, ranked
// descending; ties resolve to the lower row index. Requires k <= rows.
QueryPayload top_k_select(const Tensor& features, const Tensor& centers,
                          const Tensor& scores, std::size_t k, const Pose& pose,
                          std::uint32_t agent_id);

WireFrame serialize(const QueryPayload& p);
QueryPayload deserialize(const WireFrame& f);

std::uint64_t frame_size_bytes(std::uint64_t k, std::uint64_t d, std::uint64_t c);

// Transmitted payload cost in bits: k * (d + 3 + c) * 32. Header and pose
// are bookkeeping, not counted.
std::uint64_t bandwidth_bits(std::uint64_t k, std::uint64_t d, std::uint64_t c);

// Megabits (1e6 bits) with three decimals, e.g. "0.416".
std::string format_megabits(std::uint64_t bits);

void dump_frame(const std::filesystem::path& path, const WireFrame& f);
WireFrame load_frame(const std::filesystem::path& path);

}  // namespace cqf::wire
