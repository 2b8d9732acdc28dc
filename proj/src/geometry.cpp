#include "cqfuse/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <tuple>

namespace cqf {

namespace {

constexpr double kPoseTol = 1e-9;
constexpr double kTransformTol = 1e-6;

// Max-abs deviation of R^T R from identity plus det error.
double rotation_defect(const double* r /* row-major 3x3 */) {
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[k * 3 + i] * r[k * 3 + j];
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) -
                     r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  worst = std::max(worst, std::abs(det - 1.0));
  return worst;
}

}  // namespace

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

double normalize_yaw(double yaw) {
  double y = std::fmod(yaw + std::numbers::pi, 2.0 * std::numbers::pi);
  if (y <= 0.0) y += 2.0 * std::numbers::pi;
  return y - std::numbers::pi;
}

Pose::Pose(const std::array<double, 9>& r, const Vec3& t) : rotation(r), translation(t) {
  if (rotation_defect(rotation.data()) > kPoseTol)
    throw std::invalid_argument("Pose: rotation is not orthonormal with det +1");
}

Pose Pose::from_yaw(double yaw, const Vec3& t) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return Pose({c, -s, 0, s, c, 0, 0, 0, 1}, t);
}

Transform::Transform() : m_{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1} {}

Transform::Transform(const std::array<double, 16>& m) : m_(m) {
  if (m_[12] != 0.0 || m_[13] != 0.0 || m_[14] != 0.0 || m_[15] != 1.0)
    throw std::invalid_argument("Transform: bottom row must be [0,0,0,1]");
  const double r[9] = {m_[0], m_[1], m_[2], m_[4], m_[5], m_[6], m_[8], m_[9], m_[10]};
  if (rotation_defect(r) > kTransformTol)
    throw std::invalid_argument("Transform: rotation block is not orthonormal with det +1");
}

Transform Transform::from_pose(const Pose& p) {
  const auto& r = p.rotation;
  return Transform({r[0], r[1], r[2], p.translation.x,
                    r[3], r[4], r[5], p.translation.y,
                    r[6], r[7], r[8], p.translation.z,
                    0, 0, 0, 1},
                   Unchecked{});
}

Pose Transform::to_pose() const {
  return Pose({m_[0], m_[1], m_[2], m_[4], m_[5], m_[6], m_[8], m_[9], m_[10]},
              {m_[3], m_[7], m_[11]});
}

Transform compose(const Transform& a, const Transform& b) {
  std::array<double, 16> out{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a.m_[i * 4 + k] * b.m_[k * 4 + j];
      out[i * 4 + j] = s;
    }
  // product of rigids is rigid up to roundoff; skip re-validation
  return Transform(out, Transform::Unchecked{});
}

Transform invert(const Transform& t) {
  // rigid inverse: [R^T, -R^T p]
  std::array<double, 16> out{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out[i * 4 + j] = t.m_[j * 4 + i];
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (int j = 0; j < 3; ++j) s += out[i * 4 + j] * t.m_[j * 4 + 3];
    out[i * 4 + 3] = -s;
  }
  out[15] = 1.0;
  return Transform(out, Transform::Unchecked{});
}

Transform relative_transform(const Pose& cav, const Pose& ego) {
  return compose(invert(Transform::from_pose(ego)), Transform::from_pose(cav));
}

Vec3 transform_point(const Transform& t, const Vec3& p) {
  const auto& m = t.flat();
  return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
          m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
          m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
}

std::vector<Vec3> transform_points(const Transform& t, std::span<const Vec3> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(transform_point(t, p));
  return out;
}

BBox3D::BBox3D(const Vec3& c, double l, double w, double h, double yaw_)
    : center(c), length(l), width(w), height(h), yaw(normalize_yaw(yaw_)) {
  if (!(l > 0.0) || !(w > 0.0) || !(h > 0.0))
    throw std::invalid_argument("BBox3D: sizes must be positive");
}

std::array<Vec2, 4> BBox3D::bev_corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double hl = 0.5 * length, hw = 0.5 * width;
  // local corners ccw, rotated into world
  const double lx[4] = {hl, -hl, -hl, hl};
  const double ly[4] = {hw, hw, -hw, -hw};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = {center.x + c * lx[i] - s * ly[i], center.y + s * lx[i] + c * ly[i]};
  return out;
}

double Polygon2D::area() const {
  const std::size_t n = vertices.size();
  if (n < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = vertices[i];
    const auto& q = vertices[(i + 1) % n];
    twice += p.x * q.y - q.x * p.y;
  }
  return 0.5 * twice;
}

Polygon2D clip_convex(const Polygon2D& subject, const Polygon2D& clip) {
  std::vector<Vec2> poly = subject.vertices;
  const std::size_t m = clip.vertices.size();
  for (std::size_t e = 0; e < m && !poly.empty(); ++e) {
    const Vec2 a = clip.vertices[e];
    const Vec2 b = clip.vertices[(e + 1) % m];
    // inside = left of directed edge a->b (ccw clip polygon)
    auto side = [&](const Vec2& p) {
      return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    };
    std::vector<Vec2> next;
    next.reserve(poly.size() + 2);
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec2 cur = poly[i];
      const Vec2 prev = poly[(i + poly.size() - 1) % poly.size()];
      const double sc = side(cur), sp = side(prev);
      if (sc >= 0.0) {
        if (sp < 0.0) {
          const double t = sp / (sp - sc);
          next.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
        }
        next.push_back(cur);
      } else if (sp >= 0.0) {
        const double t = sp / (sp - sc);
        next.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
    }
    poly = std::move(next);
  }
  return Polygon2D{std::move(poly)};
}

double bev_iou(const BBox3D& a, const BBox3D& b) {
  // canonical argument order makes the result exactly symmetric
  auto key = [](const BBox3D& x) {
    return std::make_tuple(x.center.x, x.center.y, x.yaw, x.length, x.width);
  };
  const BBox3D& first = key(a) <= key(b) ? a : b;
  const BBox3D& second = key(a) <= key(b) ? b : a;

  auto poly = [](const BBox3D& x) {
    const auto c = x.bev_corners();
    return Polygon2D{{c[0], c[1], c[2], c[3]}};
  };
  const Polygon2D pa = poly(first), pb = poly(second);
  const double inter = clip_convex(pa, pb).area();
  const double uni = pa.area() + pb.area() - inter;
  if (!(inter > 0.0) || !(uni > 0.0)) return 0.0;
  return std::min(inter / uni, 1.0);
}

}  // namespace cqf
