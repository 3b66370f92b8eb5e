// Simulation domain transform: motion bounding, the [0,2]^3 mapping with
// scale S and offset coefficient C, camera conjugation, physics rescaling.
#pragma once

#include <cmath>

#include "simloop/camera.hpp"
#include "simloop/core.hpp"
#include "simloop/dynamics.hpp"
#include "simloop/materials.hpp"

namespace simloop {

struct SimDomain {
  double S = 1.0;                   // sim units per meter
  Mat3 R = Mat3::Identity();        // world -> sim rotation
  Vec3 t = Vec3::Zero();            // sim units
  double C = 1.25;                  // offset coefficient
  int n = 128;                      // grid nodes per axis
  double dx = 2.0 / 128;            // cell size, sim units
  Vec3 gravity_sim = Vec3::Zero();  // sim units / s^2
  double dt = 0;                    // informational stable-step estimate, s

  Vec3 to_sim(const Vec3& x_m) const { return S * (R * x_m) + t; }
  Vec3 from_sim(const Vec3& x_s) const { return R.transpose() * (x_s - t) / S; }
  Vec3 to_sim_velocity(const Vec3& v_m) const { return S * (R * v_m); }
  Vec3 from_sim_velocity(const Vec3& v_s) const {
    return R.transpose() * v_s / S;
  }
  double to_sim_length(double l) const { return S * l; }

  void validate() const {
    if (!(S > 0)) throw ValidationError("validation: domain scale S must be > 0");
    if (!(C >= 1)) throw ValidationError("validation: C >= 1 required");
    if (n < 8) throw ValidationError("validation: grid n too small");
  }
};

// Swept ballistic envelope of a bounding sphere, per-axis analytic extrema.
inline Box3 bound_motion(const Vec3& position, const Vec3& v, double radius,
                         double horizon, const Vec3& gravity) {
  if (!(horizon > 0)) throw ValidationError("validation: horizon must be > 0");
  Box3 box;
  for (int a = 0; a < 3; ++a) {
    double p = position[a], vi = v[a], g = gravity[a];
    double lo = std::min(p, p + vi * horizon + 0.5 * g * horizon * horizon);
    double hi = std::max(p, p + vi * horizon + 0.5 * g * horizon * horizon);
    if (g != 0) {
      double ts = -vi / g;
      if (ts > 0 && ts < horizon) {
        double pe = p + vi * ts + 0.5 * g * ts * ts;
        lo = std::min(lo, pe);
        hi = std::max(hi, pe);
      }
    }
    box.lo[a] = lo - radius;
    box.hi[a] = hi + radius;
  }
  return box;
}

inline Box3 bound_motion(const ObjectInitState& state, double horizon,
                         const Vec3& gravity) {
  return bound_motion(state.position, state.v, state.radius, horizon, gravity);
}

inline SimDomain build_domain(const Box3& fg_box, const Box3& bg_box, double C,
                              int n, const Vec3& gravity_metric = Vec3(0, -9.8, 0),
                              const Mat3& R = Mat3::Identity()) {
  if (!(C >= 1)) throw ValidationError("validation: C >= 1 required");
  if (fg_box.empty() && bg_box.empty())
    throw ValidationError("validation: both domain boxes empty");
  Box3 u = Box3::unite(fg_box, bg_box);
  double L = C * u.max_extent();
  if (!(L > 0))
    throw ValidationError("validation: degenerate (zero-extent) scene union");

  SimDomain d;
  d.S = 2.0 / L;
  d.R = R;
  d.C = C;
  d.n = n;
  d.dx = 2.0 / n;
  d.t = Vec3(1, 1, 1) - d.S * (R * u.center());
  d.gravity_sim = d.S * (R * gravity_metric);
  d.validate();
  return d;
}

// Conjugates a metric camera so that projecting sim-space points reproduces
// the metric projections exactly; reported depth scales by S.
inline CameraFrame conjugate_camera(const SimDomain& d, const CameraFrame& cam) {
  CameraFrame out = cam;
  out.R = cam.R * d.R.transpose();
  out.t = d.S * cam.t - out.R * d.t;
  return out;
}

// Young's modulus is capped so explicit stepping stays tractable; stiffer
// materials run in a quasi-rigid regime.
constexpr double kYoungsSimCap = 5e8;

inline MaterialParams rescale_material(const MaterialParams& params, double S,
                                       bool* clamped = nullptr) {
  if (!(S > 0)) throw ValidationError("validation: scale S must be > 0");
  MaterialParams out = params;
  double e = params.youngs;
  if (clamped) *clamped = e > kYoungsSimCap;
  out.youngs = std::min(e, kYoungsSimCap) * S * S;
  return out;
}

}  // namespace simloop
