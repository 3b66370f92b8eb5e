// Texture-consistency targets and loss: dense correspondence interpolation,
// first-frame warping with rendered-pixel fallback, masked MSE with analytic
// gradient, and pixel-space descent used to exercise the loss.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include <json.hpp>

#include "simloop/core.hpp"
#include "simloop/image.hpp"
#include "simloop/render.hpp"

namespace simloop {

struct DenseMap {
  ImageF p1;      // 2 channels: frame-1 pixel coords
  ImageU8 valid;  // 1 where a correspondence exists
  int frame_index = 0;

  DenseMap() = default;
  DenseMap(int w, int h) : p1(w, h, 2), valid(w, h, 1) {}
};

// IDW interpolation of the displacement p1 - qt over the k nearest entries
// within `radius` pixels; interpolating displacements instead of raw p1
// reproduces identity and translation fields exactly. Only entries visible in
// frame 1 participate.
inline DenseMap densify_correspondences(const CorrespondenceSet& cs,
                                        const ImageU8& mask, int k = 4,
                                        double radius = 8.0) {
  if (k < 1) throw ValidationError("validation: k must be >= 1");
  if (!(radius > 0)) throw ValidationError("validation: radius must be > 0");
  const int w = mask.width, h = mask.height;
  DenseMap dm(w, h);
  dm.frame_index = cs.frame_index;

  std::vector<int> usable;
  for (size_t i = 0; i < cs.entries.size(); ++i)
    if (cs.entries[i].visible_in_frame1) usable.push_back((int)i);
  if (usable.empty()) return dm;

  std::vector<std::vector<int>> cells(size_t(w) * h);
  for (int ui : usable) {
    const Vec2& q = cs.entries[ui].qt;
    int cx = std::max(0, std::min(w - 1, (int)std::floor(q.x())));
    int cy = std::max(0, std::min(h - 1, (int)std::floor(q.y())));
    cells[size_t(cy) * w + cx].push_back(ui);
  }

  const int reach = (int)std::ceil(radius) + 1;
  const double r2 = radius * radius;
  std::vector<std::pair<double, int>> near;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y)) continue;
      near.clear();
      for (int cy = std::max(0, y - reach); cy <= std::min(h - 1, y + reach);
           ++cy)
        for (int cx = std::max(0, x - reach); cx <= std::min(w - 1, x + reach);
             ++cx)
          for (int ei : cells[size_t(cy) * w + cx]) {
            double d2 = (cs.entries[ei].qt - Vec2(x, y)).squaredNorm();
            if (d2 <= r2) near.push_back({d2, ei});
          }
      if (near.empty()) continue;
      std::sort(near.begin(), near.end());
      if ((int)near.size() > k) near.resize(k);
      Vec2 offset;
      if (near[0].first < 1e-18) {
        const auto& e = cs.entries[near[0].second];
        offset = e.p1 - e.qt;
      } else {
        double wsum = 0;
        Vec2 acc = Vec2::Zero();
        for (const auto& [d2, ei] : near) {
          double wgt = 1.0 / d2;
          wsum += wgt;
          acc += wgt * (cs.entries[ei].p1 - cs.entries[ei].qt);
        }
        offset = acc / wsum;
      }
      dm.p1.at(x, y, 0) = (float)(x + offset.x());
      dm.p1.at(x, y, 1) = (float)(y + offset.y());
      dm.valid.at(x, y) = 1;
    }
  return dm;
}

// ---------------------------------------------------------------------------
// Warp targets

enum class SampleMode { bilinear, nearest };

inline SampleMode sample_mode_from_string(const std::string& s) {
  if (s == "bilinear") return SampleMode::bilinear;
  if (s == "nearest") return SampleMode::nearest;
  throw ValidationError("validation: unknown sample mode '" + s + "'");
}

inline Vec3 sample_image(const ImageF& img, double u, double v,
                         SampleMode mode) {
  u = std::max(0.0, std::min(double(img.width - 1), u));
  v = std::max(0.0, std::min(double(img.height - 1), v));
  if (mode == SampleMode::nearest) {
    int x = (int)std::lround(u), y = (int)std::lround(v);
    return Vec3(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2));
  }
  int x0 = std::min(img.width - 2, std::max(0, (int)std::floor(u)));
  int y0 = std::min(img.height - 2, std::max(0, (int)std::floor(v)));
  double fx = u - x0, fy = v - y0;
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    double a = img.at(x0, y0, c) * (1 - fx) + img.at(x0 + 1, y0, c) * fx;
    double b = img.at(x0, y0 + 1, c) * (1 - fx) + img.at(x0 + 1, y0 + 1, c) * fx;
    out[c] = a * (1 - fy) + b * fy;
  }
  return out;
}

enum : uint8_t { kSrcInvalid = 0, kSrcFrame1 = 1, kSrcRender = 2 };

struct WarpTarget {
  ImageF rgb;    // 3 channels, [0,1]
  ImageU8 src;   // kSrc* codes
  int frame_index = 0;

  WarpTarget() = default;
  WarpTarget(int w, int h) : rgb(w, h, 3), src(w, h, 1) {}
};

inline WarpTarget build_warp_target(const ImageF& frame1, const DenseMap& dm,
                                    const RenderResult& rt,
                                    const ImageU8& fg_mask,
                                    SampleMode mode = SampleMode::bilinear) {
  if (frame1.channels != 3)
    throw ValidationError("validation: frame1 must be RGB");
  if (frame1.width != dm.p1.width || frame1.height != dm.p1.height ||
      fg_mask.width != dm.p1.width || fg_mask.height != dm.p1.height ||
      rt.mask.width != dm.p1.width || rt.mask.height != dm.p1.height)
    throw ValidationError("validation: warp target input resolutions differ");

  WarpTarget t(frame1.width, frame1.height);
  t.frame_index = dm.frame_index;
  for (int y = 0; y < frame1.height; ++y)
    for (int x = 0; x < frame1.width; ++x) {
      if (!fg_mask.at(x, y)) continue;
      if (dm.valid.at(x, y)) {
        Vec3 c = sample_image(frame1, dm.p1.at(x, y, 0), dm.p1.at(x, y, 1),
                              mode);
        t.rgb.at(x, y, 0) = (float)c.x();
        t.rgb.at(x, y, 1) = (float)c.y();
        t.rgb.at(x, y, 2) = (float)c.z();
        t.src.at(x, y) = kSrcFrame1;
      } else if (rt.mask.at(x, y)) {
        for (int c = 0; c < 3; ++c)
          t.rgb.at(x, y, c) = rt.rgb.at(x, y, c) / 255.0f;
        t.src.at(x, y) = kSrcRender;
      }
    }
  return t;
}

inline WarpTarget build_warp_target(const ImageF& frame1, const DenseMap& dm,
                                    const RenderResult& rt,
                                    SampleMode mode = SampleMode::bilinear) {
  return build_warp_target(frame1, dm, rt, rt.mask, mode);
}

// ---------------------------------------------------------------------------
// Loss

struct FrameLoss {
  int t = 0;
  double l_tex = 0;      // channel-mean MSE over counted pixels
  double l_tex_sum = 0;  // raw squared-error sum
  int64_t n_pixels = 0;
  int64_t n_frame1 = 0;
  int64_t n_render = 0;
};

struct LossReport {
  std::vector<FrameLoss> frames;
  double l_ttco = 0;
};

inline FrameLoss eval_frame_loss(const ImageF& candidate,
                                 const WarpTarget& target) {
  if (!candidate.same_shape(target.rgb))
    throw ValidationError("validation: candidate and target shapes differ");
  FrameLoss fl;
  fl.t = target.frame_index;
  for (int y = 0; y < candidate.height; ++y)
    for (int x = 0; x < candidate.width; ++x) {
      uint8_t s = target.src.at(x, y);
      if (s == kSrcInvalid) continue;
      fl.n_pixels++;
      if (s == kSrcFrame1) fl.n_frame1++;
      if (s == kSrcRender) fl.n_render++;
      for (int c = 0; c < 3; ++c) {
        double d = candidate.at(x, y, c) - target.rgb.at(x, y, c);
        fl.l_tex_sum += d * d;
      }
    }
  fl.l_tex = fl.n_pixels ? fl.l_tex_sum / (3.0 * fl.n_pixels) : 0.0;
  return fl;
}

// candidate[i] is video frame i+1; targets carry frame_index >= 2.
inline LossReport eval_loss(const std::vector<ImageF>& candidate,
                            const std::vector<WarpTarget>& targets) {
  LossReport rep;
  bool any = false;
  for (const auto& t : targets) {
    if (t.frame_index < 2 || t.frame_index > (int)candidate.size())
      throw ValidationError(strfmt(
          "validation: target frame %d outside candidate video of %zu frames",
          t.frame_index, candidate.size()));
    FrameLoss fl = eval_frame_loss(candidate[t.frame_index - 1], t);
    any = any || fl.n_pixels > 0;
    rep.l_ttco += fl.l_tex;
    rep.frames.push_back(fl);
  }
  if (!targets.empty() && !any)
    throw ValidationError("validation: empty loss support");
  return rep;
}

// d L_tex / d pixel = 2 (c - target) / (3 N_t) on counted pixels, 0 elsewhere.
inline ImageF loss_gradient(const ImageF& candidate, const WarpTarget& target) {
  if (!candidate.same_shape(target.rgb))
    throw ValidationError("validation: candidate and target shapes differ");
  ImageF g(candidate.width, candidate.height, 3);
  int64_t n = 0;
  for (uint8_t s : target.src.data)
    if (s != kSrcInvalid) n++;
  if (n == 0) return g;
  double scale = 2.0 / (3.0 * n);
  for (int y = 0; y < candidate.height; ++y)
    for (int x = 0; x < candidate.width; ++x) {
      if (target.src.at(x, y) == kSrcInvalid) continue;
      for (int c = 0; c < 3; ++c)
        g.at(x, y, c) =
            (float)(scale * (candidate.at(x, y, c) - target.rgb.at(x, y, c)));
    }
  return g;
}

struct DescentResult {
  std::vector<ImageF> video;
  std::vector<double> curve;  // L_TTCO before each step, then after the last
};

inline DescentResult descend_on_pixels(std::vector<ImageF> candidate,
                                       const std::vector<WarpTarget>& targets,
                                       int steps, double lr) {
  if (steps < 1) throw ValidationError("validation: steps must be >= 1");
  if (!(lr > 0)) throw ValidationError("validation: lr must be > 0");
  DescentResult res;
  res.curve.push_back(eval_loss(candidate, targets).l_ttco);
  for (int s = 0; s < steps; ++s) {
    for (const auto& t : targets) {
      ImageF& frame = candidate[t.frame_index - 1];
      ImageF g = loss_gradient(frame, t);
      for (size_t i = 0; i < frame.data.size(); ++i)
        frame.data[i] -= (float)(lr * g.data[i]);
    }
    res.curve.push_back(eval_loss(candidate, targets).l_ttco);
  }
  res.video = std::move(candidate);
  return res;
}

// ---------------------------------------------------------------------------
// Conversions and I/O

inline ImageF image_to_float(const ImageU8& img) {
  ImageF out(img.width, img.height, img.channels);
  for (size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = img.data[i] / 255.0f;
  return out;
}

inline ImageU8 image_to_u8(const ImageF& img) {
  ImageU8 out(img.width, img.height, img.channels);
  for (size_t i = 0; i < img.data.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, img.data[i]));
    out.data[i] = (uint8_t)std::lround(v * 255.0f);
  }
  return out;
}

inline void write_warp_target(const std::filesystem::path& dir,
                              const WarpTarget& t) {
  std::filesystem::create_directories(dir);
  write_png(dir / strfmt("%04d.png", t.frame_index), image_to_u8(t.rgb));
  write_png(dir / strfmt("%04d.src.png", t.frame_index), t.src);
}

inline WarpTarget read_warp_target(const std::filesystem::path& dir, int t) {
  WarpTarget out;
  out.frame_index = t;
  out.rgb = image_to_float(read_png(dir / strfmt("%04d.png", t)));
  out.src = read_png(dir / strfmt("%04d.src.png", t));
  if (out.src.channels != 1)
    throw IoError("source map must be single channel");
  return out;
}

inline void write_loss_report(const std::filesystem::path& path,
                              const LossReport& rep) {
  nlohmann::json j;
  j["l_ttco"] = rep.l_ttco;
  j["per_frame"] = nlohmann::json::array();
  for (const auto& f : rep.frames)
    j["per_frame"].push_back({{"t", f.t},
                              {"l_tex", f.l_tex},
                              {"l_tex_sum", f.l_tex_sum},
                              {"n_pixels", f.n_pixels},
                              {"n_frame1", f.n_frame1},
                              {"n_render", f.n_render}});
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline LossReport read_loss_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(strfmt("validation: bad loss report %s: %s",
                                 path.string().c_str(), e.what()));
  }
  LossReport rep;
  rep.l_ttco = j.at("l_ttco").get<double>();
  for (const auto& f : j.at("per_frame")) {
    FrameLoss fl;
    fl.t = f.at("t").get<int>();
    fl.l_tex = f.at("l_tex").get<double>();
    fl.l_tex_sum = f.value("l_tex_sum", 0.0);
    fl.n_pixels = f.value("n_pixels", (int64_t)0);
    fl.n_frame1 = f.at("n_frame1").get<int64_t>();
    fl.n_render = f.at("n_render").get<int64_t>();
    rep.frames.push_back(fl);
  }
  return rep;
}

inline std::vector<ImageF> load_video_frames(const std::filesystem::path& dir,
                                             int num_frames) {
  std::vector<ImageF> out;
  for (int t = 1; t <= num_frames; ++t) {
    ImageU8 img = read_png(dir / strfmt("%04d.png", t));
    if (img.channels == 1) {
      ImageU8 rgb(img.width, img.height, 3);
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          rgb.at(x, y, 0) = rgb.at(x, y, 1) = rgb.at(x, y, 2) = img.at(x, y);
      img = rgb;
    }
    out.push_back(image_to_float(img));
  }
  return out;
}

}  // namespace simloop
