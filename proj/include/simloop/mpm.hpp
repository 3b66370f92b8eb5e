// MLS-MPM elastic solid simulator: quadratic B-spline transfers, APIC affine
// velocities, fixed-corotated stress, voxel-occupancy collider with Coulomb
// contact. P2G runs as a cell-sorted gather per grid node so results are
// bit-identical for any thread count.
#pragma once

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include "simloop/core.hpp"
#include "simloop/domain.hpp"
#include "simloop/materials.hpp"
#include "simloop/mesh.hpp"

namespace simloop {

struct ParticleSet {
  std::vector<Vec3> x, v;        // sim units
  std::vector<Mat3> F, C;        // deformation gradient, APIC affine matrix
  std::vector<double> mass, volume;
  std::vector<double> mu, lambda;      // Lame parameters (sim-rescaled)
  std::vector<double> damping, friction;
  std::vector<double> wave2_cfl;  // E_sim / rho, for the CFL bound
  std::vector<double> wave2_sel;  // (lambda + 2 mu) / rho, for step selection
  std::vector<Vec3> color;
  std::vector<int> object_id;
  std::vector<uint64_t> id;

  size_t size() const { return x.size(); }

  void append(const ParticleSet& o) {
    auto cat = [](auto& dst, const auto& src) {
      dst.insert(dst.end(), src.begin(), src.end());
    };
    cat(x, o.x); cat(v, o.v); cat(F, o.F); cat(C, o.C);
    cat(mass, o.mass); cat(volume, o.volume);
    cat(mu, o.mu); cat(lambda, o.lambda);
    cat(damping, o.damping); cat(friction, o.friction);
    cat(wave2_cfl, o.wave2_cfl); cat(wave2_sel, o.wave2_sel);
    cat(color, o.color); cat(object_id, o.object_id); cat(id, o.id);
  }
};

struct Grid {
  int n = 0;
  double dx = 0;
  std::vector<double> mass;
  std::vector<Vec3> vel;
  std::vector<double> fric;  // mass-weighted particle friction

  Grid() = default;
  Grid(int n_, double dx_) : n(n_), dx(dx_) {
    size_t count = size_t(n) * n * n;
    mass.assign(count, 0.0);
    vel.assign(count, Vec3::Zero());
    fric.assign(count, 0.0);
  }
  int64_t node_index(int i, int j, int k) const {
    return (int64_t(i) * n + j) * n + k;
  }
};

struct Collider {
  int n = 0;
  double dx = 0;
  double mu_bg = 0;
  std::vector<uint8_t> occupied;
  std::vector<int32_t> normal_index;  // -1 where unoccupied
  std::vector<Vec3> normals;

  bool empty() const { return normals.empty(); }
  bool occupied_at(int64_t node) const {
    return !occupied.empty() && occupied[node] != 0;
  }
};

inline std::pair<double, double> lame_parameters(double youngs, double poisson) {
  double mu = youngs / (2.0 * (1.0 + poisson));
  double lambda =
      youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
  return {mu, lambda};
}

inline Mat3 polar_rotation(const Mat3& F) {
  Mat3 ata = F.transpose() * F;
  Eigen::SelfAdjointEigenSolver<Mat3> es;
  es.computeDirect(ata);
  Vec3 ev = es.eigenvalues();
  if (ev[0] <= 1e-12 * std::max(1.0, ev[2]) || F.determinant() <= 1e-12) {
    Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 V = svd.matrixV();
    if ((svd.matrixU() * V.transpose()).determinant() < 0) V.col(2) *= -1.0;
    return svd.matrixU() * V.transpose();
  }
  Vec3 inv_s(1.0 / std::sqrt(ev[0]), 1.0 / std::sqrt(ev[1]),
             1.0 / std::sqrt(ev[2]));
  Mat3 sinv = es.eigenvectors() * inv_s.asDiagonal() *
              es.eigenvectors().transpose();
  return F * sinv;
}

// Fixed-corotated first Piola-Kirchhoff stress times F^T.
inline Mat3 corotated_pft(const Mat3& F, double mu, double lambda) {
  Mat3 R = polar_rotation(F);
  double J = F.determinant();
  return 2.0 * mu * (F - R) * F.transpose() +
         Mat3::Identity() * (lambda * (J - 1.0) * J);
}

inline double max_particle_speed(const ParticleSet& ps) {
  double m = 0;
  for (const auto& v : ps.v) m = std::max(m, v.norm());
  return m;
}

inline double cfl_wave_speed(const ParticleSet& ps) {
  double w = 0;
  for (double r : ps.wave2_cfl) w = std::max(w, r);
  return std::sqrt(w);
}

inline double selection_wave_speed(const ParticleSet& ps) {
  double w = 0;
  for (double r : ps.wave2_sel) w = std::max(w, r);
  return std::sqrt(w);
}

inline Vec3 total_momentum(const ParticleSet& ps) {
  Vec3 p = Vec3::Zero();
  for (size_t i = 0; i < ps.size(); ++i) p += ps.mass[i] * ps.v[i];
  return p;
}

inline double total_mass(const ParticleSet& ps) {
  double m = 0;
  for (double mi : ps.mass) m += mi;
  return m;
}

inline Vec3 center_of_mass(const ParticleSet& ps) {
  Vec3 c = Vec3::Zero();
  double m = 0;
  for (size_t i = 0; i < ps.size(); ++i) {
    c += ps.mass[i] * ps.x[i];
    m += ps.mass[i];
  }
  return c / m;
}

inline double kinetic_energy(const ParticleSet& ps) {
  double e = 0;
  for (size_t i = 0; i < ps.size(); ++i)
    e += 0.5 * ps.mass[i] * ps.v[i].squaredNorm();
  return e;
}

inline double elastic_energy(const ParticleSet& ps) {
  double e = 0;
  for (size_t i = 0; i < ps.size(); ++i) {
    Eigen::SelfAdjointEigenSolver<Mat3> es;
    es.computeDirect(ps.F[i].transpose() * ps.F[i]);
    Vec3 sig = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    double j = sig[0] * sig[1] * sig[2];
    double psi = ps.mu[i] * ((sig[0] - 1) * (sig[0] - 1) +
                             (sig[1] - 1) * (sig[1] - 1) +
                             (sig[2] - 1) * (sig[2] - 1)) +
                 0.5 * ps.lambda[i] * (j - 1) * (j - 1);
    e += ps.volume[i] * psi;
  }
  return e;
}

inline double potential_energy(const ParticleSet& ps, const Vec3& gravity_sim) {
  double e = 0;
  for (size_t i = 0; i < ps.size(); ++i) e -= ps.mass[i] * gravity_sim.dot(ps.x[i]);
  return e;
}

// ---------------------------------------------------------------------------
// Seeding

inline ParticleSet seed_particles(const ObjectMesh& mesh,
                                  const ObjectInitState& state,
                                  const SimDomain& domain,
                                  const MaterialParams& params_sim, int ppc,
                                  uint64_t seed, uint64_t id_base = 0) {
  if (ppc < 1) throw ValidationError("validation: ppc must be >= 1");
  mesh.validate();
  state.validate();
  params_sim.validate();

  Vec3 mesh_center = mesh.centroid();
  std::vector<Vec3> verts(mesh.vertices.size());
  for (size_t i = 0; i < mesh.vertices.size(); ++i)
    verts[i] = domain.to_sim(state.position +
                             state.orientation *
                                 (state.scale * (mesh.vertices[i] - mesh_center)));
  Box3 bb;
  for (const auto& v : verts) bb.extend(v);

  int m = std::max(1, (int)std::lround(std::cbrt((double)ppc)));
  int per_cell = m * m * m;
  double dx = domain.dx;
  double h = dx / m;

  Eigen::Vector3i lo, hi;
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, (int)std::floor(bb.lo[a] / dx) - 1);
    hi[a] = std::min(domain.n - 1, (int)std::floor(bb.hi[a] / dx) + 1);
  }

  // Row-parity inside test: one +x ray per (y, z) subcell row, shared by all
  // candidates along x. Crossing x values come from the mesh triangles.
  auto row_crossings = [&](double y, double z) {
    std::vector<double> xs;
    for (const auto& f : mesh.faces) {
      const Vec3& a = verts[f[0]];
      const Vec3& b = verts[f[1]];
      const Vec3& c = verts[f[2]];
      double d1 = (b.y() - a.y()) * (z - a.z()) - (b.z() - a.z()) * (y - a.y());
      double d2 = (c.y() - b.y()) * (z - b.z()) - (c.z() - b.z()) * (y - b.y());
      double d3 = (a.y() - c.y()) * (z - c.z()) - (a.z() - c.z()) * (y - c.y());
      bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
      bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
      if (has_neg && has_pos) continue;
      double area = d1 + d2 + d3;
      if (std::abs(area) < 1e-30) continue;
      double xi = (d2 * a.x() + d3 * b.x() + d1 * c.x()) / area;
      xs.push_back(xi);
    }
    std::sort(xs.begin(), xs.end());
    return xs;
  };
  auto inside = [](const std::vector<double>& xs, double x) {
    size_t cross = std::lower_bound(xs.begin(), xs.end(), x) - xs.begin();
    return (xs.size() - cross) % 2 == 1;
  };

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jit(-0.4, 0.4);

  ParticleSet out;
  auto [mu_l, lambda_l] = lame_parameters(params_sim.youngs, params_sim.poisson);
  double p_mass = params_sim.density * dx * dx * dx / per_cell;
  double p_vol = dx * dx * dx / per_cell;
  double w_cfl = params_sim.youngs / params_sim.density;
  double w_sel = (lambda_l + 2.0 * mu_l) / params_sim.density;

  for (int j = lo[1]; j <= hi[1]; ++j)
    for (int b = 0; b < m; ++b)
      for (int k = lo[2]; k <= hi[2]; ++k)
        for (int c = 0; c < m; ++c) {
          double y = (j + (b + 0.5) / m) * dx;
          double z = (k + (c + 0.5) / m) * dx;
          std::vector<double> xs = row_crossings(y, z);
          if (xs.empty()) {
            // keep the RNG stream aligned with the candidate count
            for (int i = lo[0]; i <= hi[0]; ++i)
              for (int a = 0; a < m; ++a) { jit(rng); jit(rng); jit(rng); }
            continue;
          }
          for (int i = lo[0]; i <= hi[0]; ++i)
            for (int a = 0; a < m; ++a) {
              double x = (i + (a + 0.5) / m) * dx;
              double jx = jit(rng) * h, jy = jit(rng) * h, jz = jit(rng) * h;
              if (!inside(xs, x)) continue;
              Vec3 pos(x + jx, y + jy, z + jz);
              Vec3 pos_m = domain.from_sim(pos);
              Vec3 vel_m = state.v + state.omega.cross(pos_m - state.center);
              out.x.push_back(pos);
              out.v.push_back(domain.to_sim_velocity(vel_m));
              out.F.push_back(Mat3::Identity());
              out.C.push_back(Mat3::Zero());
              out.mass.push_back(p_mass);
              out.volume.push_back(p_vol);
              out.mu.push_back(mu_l);
              out.lambda.push_back(lambda_l);
              out.damping.push_back(params_sim.damping);
              out.friction.push_back(params_sim.friction);
              out.wave2_cfl.push_back(w_cfl);
              out.wave2_sel.push_back(w_sel);
              size_t best = 0;
              double bd = std::numeric_limits<double>::infinity();
              for (size_t vi = 0; vi < verts.size(); ++vi) {
                double d2 = (verts[vi] - pos).squaredNorm();
                if (d2 < bd) { bd = d2; best = vi; }
              }
              out.color.push_back(mesh.colors[best]);
              out.object_id.push_back(state.object_id);
              out.id.push_back(id_base + out.id.size());
            }
        }
  if (out.size() == 0)
    throw ValidationError(strfmt(
        "validation: zero particles seeded for object %d", state.object_id));
  return out;
}

// ---------------------------------------------------------------------------
// Collider construction

inline Collider build_collider(const std::vector<Vec3>& points_sim,
                               const SimDomain& domain, double mu_bg,
                               const Vec3& toward_sim) {
  Collider col;
  col.n = domain.n;
  col.dx = domain.dx;
  col.mu_bg = mu_bg;
  if (points_sim.empty()) return col;

  int n = domain.n;
  size_t count = size_t(n) * n * n;
  std::vector<uint8_t> marked(count, 0);
  auto idx = [&](int i, int j, int k) { return (int64_t(i) * n + j) * n + k; };
  auto clampi = [&](int v) { return std::max(0, std::min(n - 1, v)); };

  for (const auto& p : points_sim) {
    int ci = (int)std::floor(p.x() / domain.dx);
    int cj = (int)std::floor(p.y() / domain.dx);
    int ck = (int)std::floor(p.z() / domain.dx);
    for (int di = 0; di <= 1; ++di)
      for (int dj = 0; dj <= 1; ++dj)
        for (int dk = 0; dk <= 1; ++dk)
          marked[idx(clampi(ci + di), clampi(cj + dj), clampi(ck + dk))] = 1;
  }
  col.occupied.assign(count, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        if (!marked[idx(i, j, k)]) continue;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj)
            for (int dk = -1; dk <= 1; ++dk)
              col.occupied[idx(clampi(i + di), clampi(j + dj),
                               clampi(k + dk))] = 1;
      }

  // bucket points by cell for the k-nearest plane fits
  std::map<int64_t, std::vector<int>> buckets;
  for (size_t pi = 0; pi < points_sim.size(); ++pi) {
    const Vec3& p = points_sim[pi];
    buckets[idx(clampi((int)std::floor(p.x() / domain.dx)),
                clampi((int)std::floor(p.y() / domain.dx)),
                clampi((int)std::floor(p.z() / domain.dx)))]
        .push_back((int)pi);
  }

  const int kNeigh = 12;
  col.normal_index.assign(count, -1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        int64_t node = idx(i, j, k);
        if (!col.occupied[node]) continue;
        Vec3 npos(i * domain.dx, j * domain.dx, k * domain.dx);

        std::vector<int> cand;
        for (int ring = 1; ring <= n; ++ring) {
          cand.clear();
          for (int di = -ring; di <= ring; ++di)
            for (int dj = -ring; dj <= ring; ++dj)
              for (int dk = -ring; dk <= ring; ++dk) {
                int ci = i + di, cj = j + dj, ck = k + dk;
                if (ci < 0 || cj < 0 || ck < 0 || ci >= n || cj >= n || ck >= n)
                  continue;
                auto it = buckets.find(idx(ci, cj, ck));
                if (it != buckets.end())
                  cand.insert(cand.end(), it->second.begin(), it->second.end());
              }
          if ((int)cand.size() >= kNeigh || ring >= 4) break;
        }
        Vec3 normal;
        if ((int)cand.size() >= 3) {
          std::sort(cand.begin(), cand.end(), [&](int a, int b) {
            double da = (points_sim[a] - npos).squaredNorm();
            double db = (points_sim[b] - npos).squaredNorm();
            return da != db ? da < db : a < b;
          });
          if ((int)cand.size() > kNeigh) cand.resize(kNeigh);
          Vec3 mean = Vec3::Zero();
          for (int pi : cand) mean += points_sim[pi];
          mean /= double(cand.size());
          Mat3 cov = Mat3::Zero();
          for (int pi : cand) {
            Vec3 d = points_sim[pi] - mean;
            cov += d * d.transpose();
          }
          Eigen::SelfAdjointEigenSolver<Mat3> es;
          es.computeDirect(cov);
          normal = es.eigenvectors().col(0);
        } else {
          normal = toward_sim - npos;
        }
        if (normal.norm() < 1e-12) normal = Vec3(0, 1, 0);
        normal.normalize();
        if (normal.dot(toward_sim - npos) < 0) normal = -normal;
        col.normal_index[node] = (int32_t)col.normals.size();
        col.normals.push_back(normal);
      }
  return col;
}

// ---------------------------------------------------------------------------
// Stepping

struct MpmScratch {
  std::vector<int64_t> key;
  std::vector<int> order;
  std::vector<int64_t> ukey;
  std::vector<int> ustart;
  std::vector<int64_t> active;
  std::vector<Eigen::Vector3i> base;
  std::vector<std::array<Vec3, 3>> w;  // weights per axis
  std::vector<Mat3> affine;
  std::vector<Vec3> mv;
};

constexpr int kStickyMargin = 3;

inline void coulomb_project(Vec3& v, const Vec3& normal, double mu) {
  double vn = v.dot(normal);
  if (vn >= 0) return;
  Vec3 vt = v - vn * normal;
  double vt_norm = vt.norm();
  if (vt_norm <= -mu * vn || vt_norm < 1e-30)
    v = Vec3::Zero();
  else
    v = vt * (1.0 + mu * vn / vt_norm);
}

inline void step(ParticleSet& ps, Grid& grid, const Collider& collider,
                 const SimDomain& domain, double dt, double cfl = 0.4,
                 MpmScratch* scratch_in = nullptr) {
  const size_t N = ps.size();
  if (N == 0) throw ValidationError("validation: empty particle set");
  if (!(dt > 0)) throw ValidationError("validation: dt must be > 0");

  double v_max = max_particle_speed(ps);
  double c_wave = cfl_wave_speed(ps);
  double dt_stable = cfl * grid.dx / std::max(v_max + c_wave, 1e-12);
  if (dt > dt_stable * (1.0 + 1e-9))
    throw ValidationError(strfmt(
        "validation: CFL violation: dt %.6g > stable bound %.6g", dt,
        dt_stable));

  MpmScratch local;
  MpmScratch& s = scratch_in ? *scratch_in : local;
  const int n = grid.n;
  const double dx = grid.dx;
  const double inv_dx = 1.0 / dx;
  const double d_inv = 4.0 * inv_dx * inv_dx;  // quadratic B-spline D^{-1}

  s.key.resize(N);
  s.base.resize(N);
  s.w.resize(N);
  s.affine.resize(N);
  s.mv.resize(N);

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t p = 0; p < (int64_t)N; ++p) {
    Eigen::Vector3i b;
    Vec3 fx;
    for (int a = 0; a < 3; ++a) {
      int bi = (int)std::floor(ps.x[p][a] * inv_dx - 0.5);
      bi = std::max(0, std::min(n - 3, bi));
      b[a] = bi;
      fx[a] = ps.x[p][a] * inv_dx - bi;
    }
    s.base[p] = b;
    for (int a = 0; a < 3; ++a) {
      s.w[p][0][a] = 0.5 * (1.5 - fx[a]) * (1.5 - fx[a]);
      s.w[p][1][a] = 0.75 - (fx[a] - 1.0) * (fx[a] - 1.0);
      s.w[p][2][a] = 0.5 * (fx[a] - 0.5) * (fx[a] - 0.5);
    }
    s.key[p] = (int64_t(b[0]) * n + b[1]) * n + b[2];
    Mat3 stress = corotated_pft(ps.F[p], ps.mu[p], ps.lambda[p]);
    s.affine[p] = ps.mass[p] * ps.C[p] - (d_inv * dt * ps.volume[p]) * stress;
    s.mv[p] = ps.mass[p] * ps.v[p];
  }

  s.order.resize(N);
  for (size_t i = 0; i < N; ++i) s.order[i] = (int)i;
  std::stable_sort(s.order.begin(), s.order.end(),
                   [&](int a, int b) { return s.key[a] < s.key[b]; });

  s.ukey.clear();
  s.ustart.clear();
  for (size_t i = 0; i < N; ++i) {
    int64_t k = s.key[s.order[i]];
    if (s.ukey.empty() || s.ukey.back() != k) {
      s.ukey.push_back(k);
      s.ustart.push_back((int)i);
    }
  }
  s.ustart.push_back((int)N);

  s.active.clear();
  for (int64_t k : s.ukey) {
    int bi = (int)(k / (int64_t(n) * n));
    int bj = (int)((k / n) % n);
    int bk = (int)(k % n);
    for (int di = 0; di < 3; ++di)
      for (int dj = 0; dj < 3; ++dj)
        for (int dk = 0; dk < 3; ++dk)
          s.active.push_back(
              (int64_t(bi + di) * n + (bj + dj)) * n + (bk + dk));
  }
  std::sort(s.active.begin(), s.active.end());
  s.active.erase(std::unique(s.active.begin(), s.active.end()), s.active.end());

  const int64_t n_active = (int64_t)s.active.size();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t ai = 0; ai < n_active; ++ai) {
    int64_t node = s.active[ai];
    grid.mass[node] = 0;
    grid.vel[node] = Vec3::Zero();
    grid.fric[node] = 0;

    int ni = (int)(node / (int64_t(n) * n));
    int nj = (int)((node / n) % n);
    int nk = (int)(node % n);
    Vec3 npos(ni * dx, nj * dx, nk * dx);

    double m_acc = 0, f_acc = 0;
    Vec3 mom_acc = Vec3::Zero();
    for (int di = 0; di < 3; ++di) {
      int bi = ni - di;
      if (bi < 0 || bi > n - 3) continue;
      for (int dj = 0; dj < 3; ++dj) {
        int bj = nj - dj;
        if (bj < 0 || bj > n - 3) continue;
        for (int dk = 0; dk < 3; ++dk) {
          int bk = nk - dk;
          if (bk < 0 || bk > n - 3) continue;
          int64_t bkey = (int64_t(bi) * n + bj) * n + bk;
          auto it = std::lower_bound(s.ukey.begin(), s.ukey.end(), bkey);
          if (it == s.ukey.end() || *it != bkey) continue;
          size_t bucket = it - s.ukey.begin();
          for (int oi = s.ustart[bucket]; oi < s.ustart[bucket + 1]; ++oi) {
            int p = s.order[oi];
            double w = s.w[p][di][0] * s.w[p][dj][1] * s.w[p][dk][2];
            double wm = w * ps.mass[p];
            m_acc += wm;
            f_acc += wm * ps.friction[p];
            mom_acc += w * (s.mv[p] + s.affine[p] * (npos - ps.x[p]));
          }
        }
      }
    }
    grid.mass[node] = m_acc;
    grid.fric[node] = f_acc;
    grid.vel[node] = mom_acc;
  }

  const Vec3 g_dt = domain.gravity_sim * dt;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t ai = 0; ai < n_active; ++ai) {
    int64_t node = s.active[ai];
    double m = grid.mass[node];
    if (m <= 0) {
      grid.vel[node] = Vec3::Zero();
      continue;
    }
    Vec3 v = grid.vel[node] / m + g_dt;
    if (!collider.empty() && collider.occupied_at(node)) {
      const Vec3& normal = collider.normals[collider.normal_index[node]];
      double mu_eff = std::max(collider.mu_bg, grid.fric[node] / m);
      coulomb_project(v, normal, mu_eff);
    }
    int ni = (int)(node / (int64_t(n) * n));
    int nj = (int)((node / n) % n);
    int nk = (int)(node % n);
    if (ni < kStickyMargin || ni >= n - kStickyMargin || nj < kStickyMargin ||
        nj >= n - kStickyMargin || nk < kStickyMargin ||
        nk >= n - kStickyMargin)
      v = Vec3::Zero();
    grid.vel[node] = v;
  }

  const double lo = dx, hi = 2.0 - 2.0 * dx;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t p = 0; p < (int64_t)N; ++p) {
    const Eigen::Vector3i& b = s.base[p];
    Vec3 v_new = Vec3::Zero();
    Mat3 bmat = Mat3::Zero();
    for (int di = 0; di < 3; ++di)
      for (int dj = 0; dj < 3; ++dj)
        for (int dk = 0; dk < 3; ++dk) {
          int64_t node =
              (int64_t(b[0] + di) * n + (b[1] + dj)) * n + (b[2] + dk);
          double w = s.w[p][di][0] * s.w[p][dj][1] * s.w[p][dk][2];
          Vec3 dpos((b[0] + di) * dx - ps.x[p].x(),
                    (b[1] + dj) * dx - ps.x[p].y(),
                    (b[2] + dk) * dx - ps.x[p].z());
          const Vec3& gv = grid.vel[node];
          v_new += w * gv;
          bmat += w * gv * dpos.transpose();
        }
    Mat3 c_new = d_inv * bmat;
    ps.x[p] += dt * v_new;
    ps.F[p] = (Mat3::Identity() + dt * c_new) * ps.F[p];
    // damping scales the particle's whole affine velocity field
    ps.v[p] = v_new * ps.damping[p];
    ps.C[p] = c_new * ps.damping[p];
    for (int a = 0; a < 3; ++a) {
      if (ps.x[p][a] < lo) {
        ps.x[p][a] = std::min(hi, lo + (lo - ps.x[p][a]));
        if (ps.v[p][a] < 0) ps.v[p][a] = -ps.v[p][a];
      } else if (ps.x[p][a] > hi) {
        ps.x[p][a] = std::max(lo, hi - (ps.x[p][a] - hi));
        if (ps.v[p][a] > 0) ps.v[p][a] = -ps.v[p][a];
      }
    }
  }

  for (size_t p = 0; p < N; ++p) {
    if (!finite(ps.x[p]) || !finite(ps.v[p]) || !ps.F[p].allFinite())
      throw SimulationBlowup(
          strfmt("simulation blow-up (particle %zu, id %llu)", p,
                 (unsigned long long)ps.id[p]));
  }
}

// ---------------------------------------------------------------------------
// Frame-stepped simulation

struct SimOptions {
  double cfl = 0.4;
  double dt_max = 0;  // 0 = no cap
};

struct SimTrajectory {
  double fps = 0;
  std::vector<double> times;
  std::vector<ParticleSet> snapshots;  // snapshots[0] is the initial state

  int num_frames() const { return (int)snapshots.size(); }
};

inline SimTrajectory simulate(ParticleSet particles, const Collider& collider,
                              const SimDomain& domain, double duration,
                              double fps, const SimOptions& opts = {}) {
  if (!(duration > 0)) throw ValidationError("validation: duration must be > 0");
  if (!(fps > 0)) throw ValidationError("validation: fps must be > 0");

  SimTrajectory traj;
  traj.fps = fps;
  traj.times.push_back(0.0);
  traj.snapshots.push_back(particles);

  Grid grid(domain.n, domain.dx);
  MpmScratch scratch;
  int frames = (int)std::lround(duration * fps);
  double frame_dt = 1.0 / fps;
  double g_norm = domain.gravity_sim.norm();
  double c_sel = selection_wave_speed(particles);

  for (int f = 1; f <= frames; ++f) {
    double v_est = max_particle_speed(particles) + g_norm * frame_dt;
    double dt_sel = opts.cfl * domain.dx / std::max(v_est + c_sel, 1e-12);
    if (opts.dt_max > 0) dt_sel = std::min(dt_sel, opts.dt_max);
    int substeps = std::max(1, (int)std::ceil(frame_dt / dt_sel));
    double dt = frame_dt / substeps;
    for (int ss = 0; ss < substeps; ++ss) {
      try {
        step(particles, grid, collider, domain, dt, opts.cfl, &scratch);
      } catch (const SimulationBlowup& e) {
        throw SimulationBlowup(
            strfmt("frame %d substep %d: %s", f, ss, e.what()));
      }
    }
    traj.times.push_back(f * frame_dt);
    traj.snapshots.push_back(particles);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Trajectory file: u64 particle count, u64 frame count, f64 fps, then per
// frame per particle f32 records (id, pos xyz, vel xyz, rgb, object id).

inline void write_trajectory(const std::filesystem::path& path,
                             const SimTrajectory& traj) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  uint64_t n = traj.snapshots.empty() ? 0 : traj.snapshots[0].size();
  uint64_t frames = traj.snapshots.size();
  double fps = traj.fps;
  out.write((const char*)&n, 8);
  out.write((const char*)&frames, 8);
  out.write((const char*)&fps, 8);
  std::vector<float> rec(11);
  for (const auto& snap : traj.snapshots) {
    if (snap.size() != n)
      throw ValidationError("validation: trajectory particle count varies");
    for (size_t p = 0; p < n; ++p) {
      rec[0] = (float)snap.id[p];
      rec[1] = (float)snap.x[p].x();
      rec[2] = (float)snap.x[p].y();
      rec[3] = (float)snap.x[p].z();
      rec[4] = (float)snap.v[p].x();
      rec[5] = (float)snap.v[p].y();
      rec[6] = (float)snap.v[p].z();
      rec[7] = (float)snap.color[p].x();
      rec[8] = (float)snap.color[p].y();
      rec[9] = (float)snap.color[p].z();
      rec[10] = (float)snap.object_id[p];
      out.write((const char*)rec.data(), sizeof(float) * 11);
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// Loaded snapshots carry kinematic state only (positions, velocities, colors,
// ids); material and deformation fields are not part of the file.
inline SimTrajectory read_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  uint64_t n = 0, frames = 0;
  double fps = 0;
  in.read((char*)&n, 8);
  in.read((char*)&frames, 8);
  in.read((char*)&fps, 8);
  if (!in || fps <= 0 || n == 0)
    throw IoError("bad trajectory header: " + path.string());
  SimTrajectory traj;
  traj.fps = fps;
  std::vector<float> rec(11);
  for (uint64_t f = 0; f < frames; ++f) {
    ParticleSet ps;
    ps.x.reserve(n);
    for (uint64_t p = 0; p < n; ++p) {
      in.read((char*)rec.data(), sizeof(float) * 11);
      if (!in) throw IoError("truncated trajectory file: " + path.string());
      ps.id.push_back((uint64_t)rec[0]);
      ps.x.emplace_back(rec[1], rec[2], rec[3]);
      ps.v.emplace_back(rec[4], rec[5], rec[6]);
      ps.color.emplace_back(rec[7], rec[8], rec[9]);
      ps.object_id.push_back((int)rec[10]);
    }
    traj.times.push_back(f / fps);
    traj.snapshots.push_back(std::move(ps));
  }
  return traj;
}

}  // namespace simloop
