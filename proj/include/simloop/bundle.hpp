// Scene bundle: the on-disk perception artifact layout and its in-memory
// model, plus background point aggregation and filtering.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "simloop/camera.hpp"
#include "simloop/core.hpp"
#include "simloop/image.hpp"
#include "simloop/mesh.hpp"

namespace simloop {

namespace fs = std::filesystem;
using nlohmann::json;

struct DepthMap {
  ImageF depth;  // metric meters, <=0 or non-finite means invalid
  int frame_index = 0;

  int width() const { return depth.width; }
  int height() const { return depth.height; }
  bool valid_at(int x, int y) const {
    float d = depth.at(x, y);
    return std::isfinite(d) && d > 0.0f;
  }
};

struct ObjectMask {
  ImageU8 labels;  // 0 = background, otherwise object id
  int frame_index = 0;

  int width() const { return labels.width; }
  int height() const { return labels.height; }
  uint8_t at(int x, int y) const { return labels.at(x, y); }
};

struct FeatureMatchSet {
  int object_id = 0;
  int frame_a = 0, frame_b = 0;
  struct Pair {
    double xa, ya, xb, yb;
  };
  std::vector<Pair> pairs;
  double dt = 0;  // seconds between the two frames

  void validate() const {
    if (dt <= 0)
      throw ValidationError(strfmt(
          "validation: object %d match set has dt_seconds <= 0", object_id));
    if (pairs.empty())
      throw ValidationError(
          strfmt("validation: object %d match set is empty", object_id));
  }
};

struct MaterialLabels {
  int object_id = 0;
  std::string composition, bounce, roughness;
};

struct SceneBundle {
  int width = 0, height = 0;
  double fps = 0;
  int num_frames = 0;
  std::vector<int> object_ids;
  std::vector<ImageU8> frames;  // RGB, index 0 holds frame 1
  std::vector<DepthMap> depths;
  std::vector<ObjectMask> masks;
  std::vector<CameraFrame> cameras;
  std::map<int, ObjectMesh> meshes;
  std::map<int, FeatureMatchSet> matches;  // may be absent per object
  std::map<int, MaterialLabels> materials;

  double duration() const { return (num_frames - 1) / fps; }

  const ImageU8& frame(int t) const { return frames.at(t - 1); }
  const DepthMap& depth(int t) const { return depths.at(t - 1); }
  const ObjectMask& mask(int t) const { return masks.at(t - 1); }
  const CameraFrame& camera(int t) const { return cameras.at(t - 1); }

  void validate() const {
    if (num_frames < 1 || frames.empty())
      throw ValidationError("validation: bundle has no frames");
    if (fps <= 0) throw ValidationError("validation: bundle fps <= 0");
    if ((int)frames.size() != num_frames || (int)depths.size() != num_frames ||
        (int)masks.size() != num_frames || (int)cameras.size() != num_frames)
      throw ValidationError("validation: per-frame collections length mismatch");
    for (int i = 0; i < num_frames; ++i) {
      if (frames[i].width != width || frames[i].height != height ||
          frames[i].channels != 3)
        throw ValidationError(
            strfmt("validation: frame %d resolution/channel mismatch", i + 1));
      if (depths[i].width() != width || depths[i].height() != height)
        throw ValidationError(
            strfmt("validation: depth %d resolution mismatch", i + 1));
      if (masks[i].width() != width || masks[i].height() != height ||
          masks[i].labels.channels != 1)
        throw ValidationError(
            strfmt("validation: mask %d resolution mismatch", i + 1));
      cameras[i].validate();
      for (uint8_t label : masks[i].labels.data)
        if (label != 0 &&
            std::find(object_ids.begin(), object_ids.end(), label) ==
                object_ids.end())
          throw ValidationError(strfmt(
              "validation: mask %d contains undeclared object id %d", i + 1,
              label));
    }
    for (int id : object_ids) {
      if (!meshes.count(id))
        throw ValidationError(strfmt("validation: object %d mesh missing", id));
      meshes.at(id).validate();
      if (!materials.count(id))
        throw ValidationError(
            strfmt("validation: object %d material labels missing", id));
    }
    for (const auto& [id, m] : matches) m.validate();
  }
};

struct BackgroundPointCloud {
  std::vector<Vec3> points;  // world meters
  std::vector<Vec3> colors;
  std::vector<int> source_frame;

  size_t size() const { return points.size(); }
  Box3 bounds() const {
    Box3 b;
    for (const auto& p : points) b.extend(p);
    return b;
  }
};

namespace detail {

inline std::string frame_name(int t, const char* ext) {
  return strfmt("%04d%s", t, ext);
}

inline json load_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("incomplete bundle: missing " + p.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("validation: bad JSON in " + p.string() + ": " +
                          e.what());
  }
  return j;
}

inline void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("incomplete bundle: missing " + p.string());
}

}  // namespace detail

inline CameraFrame camera_from_json(const json& j, int width, int height) {
  CameraFrame c;
  c.frame_index = j.at("frame").get<int>();
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  auto r = j.at("R");
  auto t = j.at("t");
  if (r.size() != 9 || t.size() != 3)
    throw ValidationError(
        strfmt("validation: camera frame %d R/t shape", c.frame_index));
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) c.R(i, k) = r[i * 3 + k].get<double>();
  for (int i = 0; i < 3; ++i) c.t[i] = t[i].get<double>();
  c.width = width;
  c.height = height;
  return c;
}

inline json camera_to_json(const CameraFrame& c) {
  json j;
  j["frame"] = c.frame_index;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  std::vector<double> r(9), t(3);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r[i * 3 + k] = c.R(i, k);
  for (int i = 0; i < 3; ++i) t[i] = c.t[i];
  j["R"] = r;
  j["t"] = t;
  return j;
}

inline FeatureMatchSet read_matches_csv(const fs::path& path, int object_id) {
  std::ifstream in(path);
  if (!in) throw IoError("incomplete bundle: missing " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      line != "frame_a,frame_b,xa,ya,xb,yb,dt_seconds")
    throw ValidationError("validation: bad match CSV header in " +
                          path.string());
  FeatureMatchSet set;
  set.object_id = object_id;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    double vals[7];
    for (int i = 0; i < 7; ++i) {
      if (!std::getline(ls, tok, ','))
        throw ValidationError(strfmt("validation: match CSV row %d malformed: %s",
                                     row, path.string().c_str()));
      vals[i] = std::stod(tok);
    }
    int fa = (int)vals[0], fb = (int)vals[1];
    if (set.pairs.empty()) {
      set.frame_a = fa;
      set.frame_b = fb;
      set.dt = vals[6];
    } else if (fa != set.frame_a || fb != set.frame_b || vals[6] != set.dt) {
      throw ValidationError(strfmt(
          "validation: match CSV row %d changes frame pair or dt: %s", row,
          path.string().c_str()));
    }
    set.pairs.push_back({vals[2], vals[3], vals[4], vals[5]});
  }
  set.validate();
  return set;
}

inline void write_matches_csv(const fs::path& path, const FeatureMatchSet& m) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "frame_a,frame_b,xa,ya,xb,yb,dt_seconds\n";
  out.precision(17);
  for (const auto& p : m.pairs)
    out << m.frame_a << "," << m.frame_b << "," << p.xa << "," << p.ya << ","
        << p.xb << "," << p.yb << "," << m.dt << "\n";
}

inline SceneBundle load_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw IoError("incomplete bundle: missing directory " + dir.string());
  SceneBundle b;
  json meta = detail::load_json_file(dir / "meta.json");
  b.fps = meta.at("fps").get<double>();
  b.width = meta.at("width").get<int>();
  b.height = meta.at("height").get<int>();
  b.num_frames = meta.at("num_frames").get<int>();
  b.object_ids = meta.at("object_ids").get<std::vector<int>>();

  for (int t = 1; t <= b.num_frames; ++t) {
    fs::path fp = dir / "frames" / detail::frame_name(t, ".png");
    detail::require_file(fp);
    ImageU8 frame = read_png(fp);
    if (frame.channels == 1) {
      ImageU8 rgb(frame.width, frame.height, 3);
      for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x)
          for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = frame.at(x, y);
      frame = std::move(rgb);
    }
    b.frames.push_back(std::move(frame));

    fs::path dp = dir / "depth" / detail::frame_name(t, ".f32");
    detail::require_file(dp);
    b.depths.push_back({read_f32_raster(dp), t});

    fs::path mp = dir / "masks" / detail::frame_name(t, ".png");
    detail::require_file(mp);
    ImageU8 mask = read_png(mp);
    if (mask.channels != 1)
      throw ValidationError(strfmt("validation: mask %d is not single-channel", t));
    b.masks.push_back({std::move(mask), t});
  }

  json cams = detail::load_json_file(dir / "cameras.json");
  if ((int)cams.size() != b.num_frames)
    throw ValidationError("validation: cameras.json length != num_frames");
  for (int t = 1; t <= b.num_frames; ++t) {
    CameraFrame c = camera_from_json(cams[t - 1], b.width, b.height);
    if (c.frame_index != t)
      throw ValidationError(
          strfmt("validation: cameras.json entry %d has frame %d", t,
                 c.frame_index));
    b.cameras.push_back(c);
  }

  json mats = detail::load_json_file(dir / "materials.json");
  for (const auto& m : mats) {
    MaterialLabels lab;
    lab.object_id = m.at("object_id").get<int>();
    lab.composition = m.at("composition").get<std::string>();
    lab.bounce = m.at("bounce").get<std::string>();
    lab.roughness = m.at("roughness").get<std::string>();
    b.materials[lab.object_id] = lab;
  }

  for (int id : b.object_ids) {
    fs::path op = dir / "objects" / strfmt("obj_%02d.ply", id);
    detail::require_file(op);
    b.meshes[id] = read_ply_mesh(op, id);
    fs::path mp = dir / "matches" / strfmt("obj_%02d.csv", id);
    if (fs::exists(mp)) b.matches[id] = read_matches_csv(mp, id);
  }

  b.validate();
  return b;
}

inline void write_bundle(const fs::path& dir, const SceneBundle& b) {
  b.validate();
  fs::create_directories(dir);
  for (int t = 1; t <= b.num_frames; ++t) {
    write_png(dir / "frames" / detail::frame_name(t, ".png"), b.frame(t));
    write_f32_raster(dir / "depth" / detail::frame_name(t, ".f32"),
                     b.depth(t).depth);
    write_png(dir / "masks" / detail::frame_name(t, ".png"), b.mask(t).labels);
  }
  json cams = json::array();
  for (const auto& c : b.cameras) cams.push_back(camera_to_json(c));
  std::ofstream(dir / "cameras.json") << cams.dump(2) << "\n";

  json mats = json::array();
  for (const auto& [id, lab] : b.materials)
    mats.push_back({{"object_id", lab.object_id},
                    {"composition", lab.composition},
                    {"bounce", lab.bounce},
                    {"roughness", lab.roughness}});
  std::ofstream(dir / "materials.json") << mats.dump(2) << "\n";

  json meta = {{"fps", b.fps},
               {"width", b.width},
               {"height", b.height},
               {"num_frames", b.num_frames},
               {"object_ids", b.object_ids}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";

  for (const auto& [id, mesh] : b.meshes)
    write_ply_mesh(dir / "objects" / strfmt("obj_%02d.ply", id), mesh);
  for (const auto& [id, m] : b.matches)
    write_matches_csv(dir / "matches" / strfmt("obj_%02d.csv", id), m);
}

inline BackgroundPointCloud build_background_points(const SceneBundle& b) {
  BackgroundPointCloud cloud;
  for (int t = 1; t <= b.num_frames; ++t) {
    const DepthMap& d = b.depth(t);
    const ObjectMask& m = b.mask(t);
    const CameraFrame& cam = b.camera(t);
    const ImageU8& rgb = b.frame(t);
    for (int y = 0; y < b.height; ++y)
      for (int x = 0; x < b.width; ++x) {
        if (m.at(x, y) != 0 || !d.valid_at(x, y)) continue;
        Vec3 p = cam.back_project(x, y, d.depth.at(x, y));
        cloud.points.push_back(p);
        cloud.colors.emplace_back(rgb.at(x, y, 0) / 255.0,
                                  rgb.at(x, y, 1) / 255.0,
                                  rgb.at(x, y, 2) / 255.0);
        cloud.source_frame.push_back(t);
      }
  }
  if (cloud.points.empty())
    throw ValidationError("validation: empty background (no unmasked valid depth)");
  return cloud;
}

inline BackgroundPointCloud filter_background_points(
    const BackgroundPointCloud& cloud, double voxel_size, int min_neighbors,
    double radius) {
  if (voxel_size <= 0) throw ValidationError("validation: voxel_size <= 0");
  BackgroundPointCloud out;
  if (cloud.points.empty()) return out;

  Box3 bb = cloud.bounds();
  auto key_of = [&](const Vec3& p) {
    Vec3 q = (p - bb.lo) / voxel_size;
    return std::array<int64_t, 3>{(int64_t)std::floor(q.x()),
                                  (int64_t)std::floor(q.y()),
                                  (int64_t)std::floor(q.z())};
  };
  struct Accum {
    Vec3 p = Vec3::Zero(), c = Vec3::Zero();
    int n = 0;
    int frame = 0;
  };
  std::map<std::array<int64_t, 3>, Accum> voxels;
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    Accum& a = voxels[key_of(cloud.points[i])];
    if (a.n == 0) a.frame = cloud.source_frame[i];
    a.p += cloud.points[i];
    a.c += cloud.colors[i];
    ++a.n;
  }
  BackgroundPointCloud sub;
  for (const auto& [k, a] : voxels) {
    sub.points.push_back(a.p / a.n);
    sub.colors.push_back(a.c / a.n);
    sub.source_frame.push_back(a.frame);
  }

  // radius outlier pass over the subsampled points
  double r2 = radius * radius;
  auto cell_of = [&](const Vec3& p) {
    Vec3 q = (p - bb.lo) / std::max(radius, 1e-12);
    return std::array<int64_t, 3>{(int64_t)std::floor(q.x()),
                                  (int64_t)std::floor(q.y()),
                                  (int64_t)std::floor(q.z())};
  };
  std::map<std::array<int64_t, 3>, std::vector<size_t>> cells;
  for (size_t i = 0; i < sub.points.size(); ++i)
    cells[cell_of(sub.points[i])].push_back(i);
  for (size_t i = 0; i < sub.points.size(); ++i) {
    int count = 0;
    auto c = cell_of(sub.points[i]);
    for (int dx = -1; dx <= 1 && count < min_neighbors; ++dx)
      for (int dy = -1; dy <= 1 && count < min_neighbors; ++dy)
        for (int dz = -1; dz <= 1 && count < min_neighbors; ++dz) {
          auto it = cells.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == cells.end()) continue;
          for (size_t j : it->second) {
            if (j == i) continue;
            if ((sub.points[i] - sub.points[j]).squaredNorm() <= r2) {
              if (++count >= min_neighbors) break;
            }
          }
        }
    if (count >= min_neighbors) {
      out.points.push_back(sub.points[i]);
      out.colors.push_back(sub.colors[i]);
      out.source_frame.push_back(sub.source_frame[i]);
    }
  }
  return out;
}

// Point-cloud PLY with an extra per-vertex source-frame property.
inline void write_ply_points(const fs::path& path,
                             const BackgroundPointCloud& cloud) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << cloud.points.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "property int frame\nend_header\n";
  out.precision(17);
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    const Vec3& p = cloud.points[i];
    const Vec3& c = cloud.colors[i];
    auto q = [](double v) {
      return std::min(255, std::max(0, (int)std::lround(v * 255.0)));
    };
    out << p.x() << " " << p.y() << " " << p.z() << " " << q(c.x()) << " "
        << q(c.y()) << " " << q(c.z()) << " " << cloud.source_frame[i] << "\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline BackgroundPointCloud read_ply_points(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  size_t n_verts = 0;
  bool header_done = false, has_frame = false;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0)
    throw IoError("not a PLY file: " + path.string());
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "element") {
      std::string what;
      size_t count = 0;
      ls >> what >> count;
      if (what == "vertex") n_verts = count;
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      if (name == "frame") has_frame = true;
    } else if (tok == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw IoError("PLY header missing end_header: " + path.string());
  BackgroundPointCloud cloud;
  for (size_t i = 0; i < n_verts; ++i) {
    double x, y, z;
    int r, g, b, f = 0;
    if (!(in >> x >> y >> z >> r >> g >> b))
      throw IoError(strfmt("PLY vertex %zu malformed: %s", i,
                           path.string().c_str()));
    if (has_frame && !(in >> f))
      throw IoError(strfmt("PLY vertex %zu missing frame: %s", i,
                           path.string().c_str()));
    cloud.points.emplace_back(x, y, z);
    cloud.colors.emplace_back(r / 255.0, g / 255.0, b / 255.0);
    cloud.source_frame.push_back(f);
  }
  return cloud;
}

}  // namespace simloop
