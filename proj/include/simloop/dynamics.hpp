// Initial object state estimation: placement, scale, linear and angular
// velocity from perception artifacts, and per-point velocity synthesis.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "simloop/bundle.hpp"
#include "simloop/core.hpp"

namespace simloop {

struct ObjectInitState {
  int object_id = 0;
  Vec3 position = Vec3::Zero();  // world meters, object center
  double scale = 1.0;            // meters per mesh unit
  Mat3 orientation = Mat3::Identity();
  Vec3 v = Vec3::Zero();         // m/s
  Vec3 omega = Vec3::Zero();     // rad/s, world frame
  Vec3 center = Vec3::Zero();    // rotation center, meters
  double radius = 0;             // bounding-sphere radius, meters
  double theta = 0;              // recovered in-plane rotation, rad
  double residual_px = 0;

  void validate() const {
    if (!(scale > 0))
      throw ValidationError(
          strfmt("validation: object %d scale must be > 0", object_id));
    if (!finite(position) || !finite(v) || !finite(omega) || !finite(center))
      throw ValidationError(
          strfmt("validation: object %d state not finite", object_id));
  }
};

namespace detail {

// Valid-depth masked pixels of one object back-projected to world space.
inline std::vector<Vec3> masked_world_points(const SceneBundle& b,
                                             int object_id, int frame,
                                             size_t* n_masked = nullptr) {
  const ObjectMask& m = b.mask(frame);
  const DepthMap& d = b.depth(frame);
  const CameraFrame& cam = b.camera(frame);
  std::vector<Vec3> pts;
  size_t masked = 0;
  for (int y = 0; y < b.height; ++y)
    for (int x = 0; x < b.width; ++x) {
      if (m.at(x, y) != object_id) continue;
      ++masked;
      if (!d.valid_at(x, y)) continue;
      pts.push_back(cam.back_project(x, y, d.depth.at(x, y)));
    }
  if (n_masked) *n_masked = masked;
  return pts;
}

// Max pairwise distance; subsampled by stride when the set is large, with the
// stride chosen so at most ~2048 points take part.
inline double point_set_diameter(const std::vector<Vec3>& pts) {
  if (pts.size() < 2) return 0.0;
  size_t stride = (pts.size() + 2047) / 2048;
  std::vector<const Vec3*> s;
  for (size_t i = 0; i < pts.size(); i += stride) s.push_back(&pts[i]);
  double best = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = i + 1; j < s.size(); ++j)
      best = std::max(best, (*s[i] - *s[j]).squaredNorm());
  return std::sqrt(best);
}

inline Vec3 centroid_of(const std::vector<Vec3>& pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  return c / double(pts.size());
}

}  // namespace detail

constexpr size_t kPlacementMinPixels = 10;

inline ObjectInitState place_object(const SceneBundle& b, int object_id) {
  size_t n_masked = 0;
  std::vector<Vec3> pts =
      detail::masked_world_points(b, object_id, 1, &n_masked);
  if (n_masked == 0)
    throw ValidationError(strfmt(
        "validation: placement failure (object %d: empty mask in frame 1)",
        object_id));
  if (pts.size() < kPlacementMinPixels || pts.size() * 5 < n_masked)
    throw ValidationError(strfmt(
        "validation: placement failure (object %d: %zu valid depth pixels of "
        "%zu masked)",
        object_id, pts.size(), n_masked));

  double point_diam = detail::point_set_diameter(pts);
  double mesh_diam = detail::point_set_diameter(b.meshes.at(object_id).vertices);
  if (point_diam <= 0 || mesh_diam <= 0)
    throw ValidationError(strfmt(
        "validation: placement failure (object %d: degenerate extent)",
        object_id));

  ObjectInitState s;
  s.object_id = object_id;
  s.position = detail::centroid_of(pts);
  s.scale = point_diam / mesh_diam;
  s.orientation = Mat3::Identity();
  s.center = s.position;
  s.radius = point_diam / 2.0;
  s.validate();
  return s;
}

inline Vec3 estimate_linear_velocity(const SceneBundle& b, int object_id,
                                     int frame_a, int frame_b) {
  if (frame_a == frame_b)
    throw ValidationError("validation: velocity frames must differ");
  auto centroid = [&](int frame) {
    size_t n_masked = 0;
    std::vector<Vec3> pts =
        detail::masked_world_points(b, object_id, frame, &n_masked);
    if (n_masked == 0 || pts.size() < kPlacementMinPixels ||
        pts.size() * 5 < n_masked)
      throw ValidationError(strfmt(
          "validation: placement failure (object %d, frame %d)", object_id,
          frame));
    return detail::centroid_of(pts);
  };
  double dt = std::abs(frame_b - frame_a) / b.fps;
  auto it = b.matches.find(object_id);
  if (it != b.matches.end() && it->second.frame_a == frame_a &&
      it->second.frame_b == frame_b)
    dt = it->second.dt;
  return (centroid(frame_b) - centroid(frame_a)) / dt;
}

struct RotationEstimate {
  double theta = 0;      // radians, image-plane
  Vec2 centroid = Vec2::Zero();  // frame-a pixel centroid
  double residual_rms = 0;
};

inline RotationEstimate estimate_rotation(const FeatureMatchSet& matches) {
  if (matches.pairs.size() < 3)
    throw ValidationError(strfmt(
        "validation: insufficient matches (object %d: %zu < 3)",
        matches.object_id, matches.pairs.size()));
  Vec2 ca = Vec2::Zero(), cb = Vec2::Zero();
  for (const auto& p : matches.pairs) {
    ca += Vec2(p.xa, p.ya);
    cb += Vec2(p.xb, p.yb);
  }
  ca /= double(matches.pairs.size());
  cb /= double(matches.pairs.size());

  double dot = 0, cross = 0, spread = 0;
  for (const auto& p : matches.pairs) {
    Vec2 a = Vec2(p.xa, p.ya) - ca;
    Vec2 b = Vec2(p.xb, p.yb) - cb;
    dot += a.dot(b);
    cross += a.x() * b.y() - a.y() * b.x();
    spread += a.squaredNorm();
  }
  if (spread <= 1e-12)
    throw ValidationError(strfmt(
        "validation: degenerate matches (object %d: coincident points)",
        matches.object_id));

  RotationEstimate est;
  est.theta = std::atan2(cross, dot);
  est.centroid = ca;
  double c = std::cos(est.theta), s = std::sin(est.theta);
  double sq = 0;
  for (const auto& p : matches.pairs) {
    Vec2 a = Vec2(p.xa, p.ya) - ca;
    Vec2 b = Vec2(p.xb, p.yb) - cb;
    Vec2 ra(c * a.x() - s * a.y(), s * a.x() + c * a.y());
    sq += (ra - b).squaredNorm();
  }
  est.residual_rms = std::sqrt(sq / matches.pairs.size());
  return est;
}

// Image-plane rotation maps to a spin about the camera view axis; image
// coordinates (x right, y down, z forward) are right-handed, so positive
// theta is a positive rotation about camera +z.
inline Vec3 rotation_to_angular_velocity(double theta, double dt,
                                         const CameraFrame& camera) {
  if (dt <= 0) throw ValidationError("validation: rotation dt must be > 0");
  return (theta / dt) * camera.view_axis_world();
}

inline std::vector<Vec3> per_point_velocity(const ObjectInitState& state,
                                            const std::vector<Vec3>& points) {
  state.validate();
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& x : points)
    out.push_back(state.v + state.omega.cross(x - state.center));
  return out;
}

}  // namespace simloop
