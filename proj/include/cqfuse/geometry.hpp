#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace cqf {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const;
};

struct Vec2 {
  double x = 0.0, y = 0.0;
};

// Yaw wrapped into (-pi, pi].
double normalize_yaw(double yaw);

// Rigid pose: row-major 3x3 rotation + translation. The constructor
// rejects non-orthonormal or reflecting rotations (tolerance 1e-9).
struct Pose {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{};

  Pose() = default;
  Pose(const std::array<double, 9>& r, const Vec3& t);
  static Pose from_yaw(double yaw, const Vec3& t);
};

// Homogeneous 4x4 rigid transform, row-major. Validated on construction:
// bottom row exactly [0,0,0,1], upper-left 3x3 orthonormal with det +1.
// The orthonormality tolerance is 1e-6 so that transforms recovered from
// float32 wire data remain constructible.
class Transform {
 public:
  Transform();  // identity
  explicit Transform(const std::array<double, 16>& m);
  static Transform from_pose(const Pose& p);

  double at(std::size_t r, std::size_t c) const { return m_[r * 4 + c]; }
  const std::array<double, 16>& flat() const { return m_; }  // row-major
  Pose to_pose() const;

 private:
  struct Unchecked {};
  Transform(const std::array<double, 16>& m, Unchecked) : m_(m) {}
  std::array<double, 16> m_;

  friend Transform compose(const Transform&, const Transform&);
  friend Transform invert(const Transform&);
};

// a applied after b: compose(a, b) * p == a * (b * p).
Transform compose(const Transform& a, const Transform& b);
Transform invert(const Transform& t);

// Maps points in the cav frame to the ego frame: inv(T_ego) * T_cav.
Transform relative_transform(const Pose& cav, const Pose& ego);

Vec3 transform_point(const Transform& t, const Vec3& p);
std::vector<Vec3> transform_points(const Transform& t, std::span<const Vec3> pts);

// Axis-aligned-when-yaw-0 box: center, extents (l along heading, w across,
// h up), heading yaw about +z. Sizes must be strictly positive; yaw is
// normalized into (-pi, pi].
struct BBox3D {
  Vec3 center{};
  double length = 1.0, width = 1.0, height = 1.0;
  double yaw = 0.0;

  BBox3D() = default;
  BBox3D(const Vec3& c, double l, double w, double h, double yaw_);

  std::array<Vec2, 4> bev_corners() const;  // counter-clockwise
};

// Convex polygon, counter-clockwise winding.
struct Polygon2D {
  std::vector<Vec2> vertices;

  double area() const;  // shoelace; >= 0 for ccw input
};

// Sutherland-Hodgman clip of a convex subject against a convex clip
// polygon (both ccw). Result is convex ccw, possibly empty.
Polygon2D clip_convex(const Polygon2D& subject, const Polygon2D& clip);

// Intersection-over-union of the two boxes' rotated BEV footprints.
// Exactly symmetric in its arguments; 0 for degenerate overlap.
double bev_iou(const BBox3D& a, const BBox3D& b);

}  // namespace cqf
