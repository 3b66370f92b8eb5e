// Z-buffered disc splatting of particle snapshots, particle correspondence
// extraction, and sparse-to-dense optical flow with template fusion.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "simloop/camera.hpp"
#include "simloop/core.hpp"
#include "simloop/image.hpp"
#include "simloop/mpm.hpp"

namespace simloop {

struct RenderResult {
  ImageU8 rgb;
  ImageU8 mask;   // object id per pixel, 0 = background
  ImageF depth;   // +inf where empty
  int frame_index = 0;
  std::vector<uint8_t> visible;      // particle owns >= 1 pixel
  std::vector<uint8_t> projectable;  // in front of camera and on screen
  std::vector<Vec2> proj;            // pixel coords, valid when projectable
  std::vector<double> pdepth;
};

// Winner per pixel is the lexicographic minimum of (depth, particle id), so
// output does not depend on particle traversal order.
inline RenderResult render_particles(const ParticleSet& ps,
                                     const CameraFrame& cam, int splat_radius,
                                     int frame_index = 0) {
  cam.validate();
  if (splat_radius < 1)
    throw ValidationError("validation: splat radius must be >= 1");
  const int w = cam.width, h = cam.height;
  const size_t N = ps.size();

  RenderResult r;
  r.frame_index = frame_index;
  r.rgb = ImageU8(w, h, 3);
  r.mask = ImageU8(w, h, 1);
  r.depth = ImageF(w, h, 1);
  std::fill(r.depth.data.begin(), r.depth.data.end(),
            std::numeric_limits<float>::infinity());
  r.visible.assign(N, 0);
  r.projectable.assign(N, 0);
  r.proj.assign(N, Vec2::Zero());
  r.pdepth.assign(N, 0.0);

  std::vector<double> best_depth(size_t(w) * h,
                                 std::numeric_limits<double>::infinity());
  std::vector<int64_t> winner(size_t(w) * h, -1);

  for (size_t p = 0; p < N; ++p) {
    Vec2 px;
    double depth;
    if (!cam.project(ps.x[p], px, depth)) continue;
    r.proj[p] = px;
    r.pdepth[p] = depth;
    int cx = (int)std::lround(px.x());
    int cy = (int)std::lround(px.y());
    if (cx < -splat_radius || cx >= w + splat_radius || cy < -splat_radius ||
        cy >= h + splat_radius)
      continue;
    r.projectable[p] = 1;
    int r2 = splat_radius * splat_radius;
    for (int dy = -splat_radius; dy <= splat_radius; ++dy)
      for (int dx = -splat_radius; dx <= splat_radius; ++dx) {
        if (dx * dx + dy * dy > r2) continue;
        int ix = cx + dx, iy = cy + dy;
        if (ix < 0 || iy < 0 || ix >= w || iy >= h) continue;
        size_t pix = size_t(iy) * w + ix;
        if (depth < best_depth[pix] ||
            (depth == best_depth[pix] && (int64_t)p < winner[pix])) {
          best_depth[pix] = depth;
          winner[pix] = (int64_t)p;
        }
      }
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t pix = size_t(y) * w + x;
      int64_t p = winner[pix];
      if (p < 0) continue;
      r.visible[p] = 1;
      auto q = [](double c) {
        return (uint8_t)std::lround(std::min(1.0, std::max(0.0, c)) * 255.0);
      };
      r.rgb.at(x, y, 0) = q(ps.color[p].x());
      r.rgb.at(x, y, 1) = q(ps.color[p].y());
      r.rgb.at(x, y, 2) = q(ps.color[p].z());
      r.mask.at(x, y) = (uint8_t)ps.object_id[p];
      r.depth.at(x, y) = (float)best_depth[pix];
    }
  return r;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  return v[mid];
}

inline int auto_splat_radius(double fx, double particle_spacing,
                             const std::vector<double>& depths) {
  double med = median_of(depths);
  if (med <= 0) return 1;
  return std::max(1, (int)std::lround(0.6 * fx * particle_spacing / med));
}

// ---------------------------------------------------------------------------
// Correspondences

struct CorrespondenceEntry {
  uint64_t id = 0;
  Vec2 p1 = Vec2::Zero();  // projection in frame 1, zero if not visible there
  Vec2 qt = Vec2::Zero();  // projection in this frame
  bool visible_in_frame1 = false;
};

struct CorrespondenceSet {
  int frame_index = 0;
  std::vector<CorrespondenceEntry> entries;
};

// Entries cover particles that own a pixel in frame t and whose projection
// lands on their own object's mask pixel.
inline CorrespondenceSet compute_correspondences(const RenderResult& r1,
                                                 const RenderResult& rt,
                                                 const ParticleSet& ps,
                                                 int frame_index) {
  CorrespondenceSet cs;
  cs.frame_index = frame_index;
  const int w = rt.mask.width, h = rt.mask.height;
  for (size_t p = 0; p < ps.size(); ++p) {
    if (!rt.visible[p]) continue;
    int mx = (int)std::lround(rt.proj[p].x());
    int my = (int)std::lround(rt.proj[p].y());
    if (mx < 0 || my < 0 || mx >= w || my >= h) continue;
    if (rt.mask.at(mx, my) != (uint8_t)ps.object_id[p]) continue;
    CorrespondenceEntry e;
    e.id = ps.id[p];
    e.qt = rt.proj[p];
    e.visible_in_frame1 = r1.visible[p] != 0;
    if (e.visible_in_frame1) e.p1 = r1.proj[p];
    cs.entries.push_back(e);
  }
  return cs;
}

// Packed 25-byte records: u64 id, f32 p1x p1y qtx qty, u8 visible_in_frame1.
inline void write_correspondences(const std::filesystem::path& path,
                                  const CorrespondenceSet& cs) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : cs.entries) {
    float f[4] = {(float)e.p1.x(), (float)e.p1.y(), (float)e.qt.x(),
                  (float)e.qt.y()};
    uint8_t vis = e.visible_in_frame1 ? 1 : 0;
    out.write((const char*)&e.id, 8);
    out.write((const char*)f, 16);
    out.write((const char*)&vis, 1);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline CorrespondenceSet read_correspondences(
    const std::filesystem::path& path, int frame_index = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  auto bytes = in.tellg();
  in.seekg(0);
  if (bytes % 25 != 0)
    throw IoError(strfmt("correspondence file size %lld is not a multiple of "
                         "the 25-byte record: %s",
                         (long long)bytes, path.string().c_str()));
  CorrespondenceSet cs;
  cs.frame_index = frame_index;
  size_t count = (size_t)bytes / 25;
  for (size_t i = 0; i < count; ++i) {
    CorrespondenceEntry e;
    float f[4];
    uint8_t vis = 0;
    in.read((char*)&e.id, 8);
    in.read((char*)f, 16);
    in.read((char*)&vis, 1);
    if (!in) throw IoError("truncated correspondence file: " + path.string());
    e.p1 = Vec2(f[0], f[1]);
    e.qt = Vec2(f[2], f[3]);
    e.visible_in_frame1 = vis != 0;
    cs.entries.push_back(e);
  }
  return cs;
}

// ---------------------------------------------------------------------------
// Optical flow

struct FlowField {
  ImageF uv;       // 2 channels
  ImageU8 valid;   // 1 = flow defined at this pixel
  int frame_src = 0, frame_dst = 0;

  FlowField() = default;
  FlowField(int w, int h) : uv(w, h, 2), valid(w, h, 1) {}
};

inline ImageU8 dilate_mask(const ImageU8& mask, int iterations) {
  ImageU8 cur = mask;
  for (int it = 0; it < iterations; ++it) {
    ImageU8 next = cur;
    for (int y = 0; y < cur.height; ++y)
      for (int x = 0; x < cur.width; ++x) {
        if (cur.at(x, y)) continue;
        bool hit = false;
        for (int dy = -1; dy <= 1 && !hit; ++dy)
          for (int dx = -1; dx <= 1 && !hit; ++dx) {
            int nx = x + dx, ny = y + dy;
            if (nx >= 0 && ny >= 0 && nx < cur.width && ny < cur.height &&
                cur.at(nx, ny))
              hit = true;
          }
        if (hit) next.at(x, y) = 1;
      }
    cur = next;
  }
  return cur;
}

// Chebyshev distance to the mask, capped at max_dist + 1.
inline std::vector<int> mask_distance(const ImageU8& mask, int max_dist) {
  std::vector<int> dist(size_t(mask.width) * mask.height, max_dist + 1);
  ImageU8 cur(mask.width, mask.height, 1);
  for (size_t i = 0; i < mask.data.size(); ++i)
    cur.data[i] = mask.data[i] ? 1 : 0;
  for (size_t i = 0; i < cur.data.size(); ++i)
    if (cur.data[i]) dist[i] = 0;
  for (int d = 1; d <= max_dist; ++d) {
    ImageU8 next = dilate_mask(cur, 1);
    for (size_t i = 0; i < next.data.size(); ++i)
      if (next.data[i] && !cur.data[i]) dist[i] = d;
    cur = next;
  }
  return dist;
}

struct FlowSample {
  Vec2 pos;
  Vec2 val;
};

// Samples live at the frame-t projections of particles visible in frame t;
// the value is the image-space motion to frame t+1.
inline std::vector<FlowSample> sim_flow_samples(const RenderResult& rt,
                                                const RenderResult& rt1) {
  std::vector<FlowSample> out;
  for (size_t p = 0; p < rt.visible.size(); ++p) {
    if (!rt.visible[p]) continue;
    if (rt1.pdepth[p] <= 0) continue;
    out.push_back({rt.proj[p], rt1.proj[p] - rt.proj[p]});
  }
  return out;
}

// Inverse-distance interpolation of the k nearest samples, evaluated over the
// mask dilated by `dilation` pixels. Validity is the rendered mask itself.
inline FlowField densify_flow(const std::vector<FlowSample>& samples,
                              const ImageU8& mask, int dilation, int k = 4) {
  const int w = mask.width, h = mask.height;
  FlowField f(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      f.valid.at(x, y) = mask.at(x, y) ? 1 : 0;
  if (samples.empty()) return f;

  std::vector<std::vector<int>> cells(size_t(w) * h);
  for (size_t si = 0; si < samples.size(); ++si) {
    int cx = std::max(0, std::min(w - 1, (int)std::floor(samples[si].pos.x())));
    int cy = std::max(0, std::min(h - 1, (int)std::floor(samples[si].pos.y())));
    cells[size_t(cy) * w + cx].push_back((int)si);
  }

  ImageU8 region = dilate_mask(f.valid, dilation);
  std::vector<int> cand;
  std::vector<std::pair<double, int>> nearest;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!region.at(x, y)) continue;
      cand.clear();
      int max_ring = std::max(w, h);
      int found_ring = -1;
      for (int ring = 0; ring <= max_ring; ++ring) {
        for (int cy = y - ring; cy <= y + ring; ++cy)
          for (int cx = x - ring; cx <= x + ring; ++cx) {
            if (std::max(std::abs(cx - x), std::abs(cy - y)) != ring) continue;
            if (cx < 0 || cy < 0 || cx >= w || cy >= h) continue;
            const auto& cell = cells[size_t(cy) * w + cx];
            cand.insert(cand.end(), cell.begin(), cell.end());
          }
        if (found_ring < 0 && (int)cand.size() >= k) found_ring = ring;
        if (found_ring >= 0 && ring >= found_ring + 1) break;
      }
      nearest.clear();
      for (int si : cand) {
        double d2 = (samples[si].pos - Vec2(x, y)).squaredNorm();
        nearest.push_back({d2, si});
      }
      std::sort(nearest.begin(), nearest.end());
      if ((int)nearest.size() > k) nearest.resize(k);
      if (nearest.empty()) continue;
      Vec2 value;
      if (nearest[0].first < 1e-18) {
        value = samples[nearest[0].second].val;
      } else {
        double wsum = 0;
        Vec2 acc = Vec2::Zero();
        for (const auto& [d2, si] : nearest) {
          double wgt = 1.0 / d2;
          wsum += wgt;
          acc += wgt * samples[si].val;
        }
        value = acc / wsum;
      }
      f.uv.at(x, y, 0) = (float)value.x();
      f.uv.at(x, y, 1) = (float)value.y();
    }
  return f;
}

// alpha = 1 inside the mask, falls off linearly over the dilation ring, 0
// beyond it. Validity comes from the side that fully owns the pixel.
inline FlowField fuse_flow(const FlowField& sim, const FlowField& tmpl,
                           const ImageU8& mask, int dilation) {
  if (!sim.uv.same_shape(tmpl.uv) || mask.width != sim.uv.width ||
      mask.height != sim.uv.height)
    throw ValidationError("validation: flow field shapes differ");
  const int w = mask.width, h = mask.height;
  ImageU8 bin(w, h, 1);
  for (size_t i = 0; i < mask.data.size(); ++i)
    bin.data[i] = mask.data[i] ? 1 : 0;
  std::vector<int> dist = mask_distance(bin, dilation);

  FlowField out(w, h);
  out.frame_src = sim.frame_src;
  out.frame_dst = sim.frame_dst;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int d = dist[size_t(y) * w + x];
      double alpha = d > dilation ? 0.0 : 1.0 - double(d) / (dilation + 1);
      out.uv.at(x, y, 0) = (float)(alpha * sim.uv.at(x, y, 0) +
                                   (1 - alpha) * tmpl.uv.at(x, y, 0));
      out.uv.at(x, y, 1) = (float)(alpha * sim.uv.at(x, y, 1) +
                                   (1 - alpha) * tmpl.uv.at(x, y, 1));
      out.valid.at(x, y) = alpha == 1.0 ? sim.valid.at(x, y) : tmpl.valid.at(x, y);
    }
  return out;
}

// ---------------------------------------------------------------------------
// .flo I/O. Invalid pixels round-trip through a large sentinel value.

constexpr float kFloMagic = 202021.25f;
constexpr float kFloInvalid = 1e10f;

inline void write_flow(const std::filesystem::path& path, const FlowField& f) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  float magic = kFloMagic;
  int32_t w = f.uv.width, h = f.uv.height;
  out.write((const char*)&magic, 4);
  out.write((const char*)&w, 4);
  out.write((const char*)&h, 4);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float u = f.uv.at(x, y, 0), v = f.uv.at(x, y, 1);
      if (!f.valid.at(x, y)) u = v = kFloInvalid;
      out.write((const char*)&u, 4);
      out.write((const char*)&v, 4);
    }
  if (!out) throw IoError("failed writing " + path.string());
}

inline FlowField read_flow(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  float magic = 0;
  int32_t w = 0, h = 0;
  in.read((char*)&magic, 4);
  in.read((char*)&w, 4);
  in.read((char*)&h, 4);
  if (!in || magic != kFloMagic)
    throw IoError("not a flow file: " + path.string());
  if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16)
    throw IoError("bad flow dimensions: " + path.string());
  FlowField f(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float u = 0, v = 0;
      in.read((char*)&u, 4);
      in.read((char*)&v, 4);
      if (!in) throw IoError("truncated flow file: " + path.string());
      bool bad = std::abs(u) > 1e9f || std::abs(v) > 1e9f;
      f.valid.at(x, y) = bad ? 0 : 1;
      f.uv.at(x, y, 0) = bad ? 0.f : u;
      f.uv.at(x, y, 1) = bad ? 0.f : v;
    }
  return f;
}

}  // namespace simloop
