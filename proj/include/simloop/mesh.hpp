// Triangle mesh type, ASCII PLY I/O and simple shape generators.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "simloop/core.hpp"

namespace simloop {

struct ObjectMesh {
  int object_id = 0;
  std::vector<Vec3> vertices;              // object-local coordinates
  std::vector<std::array<int, 3>> faces;   // triangle indices
  std::vector<Vec3> colors;                // per-vertex RGB in [0,1]

  void validate() const {
    if (vertices.empty() || faces.empty())
      throw ValidationError(
          strfmt("validation: object %d mesh is empty", object_id));
    if (colors.size() != vertices.size())
      throw ValidationError(
          strfmt("validation: object %d mesh color count mismatch", object_id));
    for (const auto& v : vertices)
      if (!finite(v))
        throw ValidationError(
            strfmt("validation: object %d mesh has non-finite vertex",
                   object_id));
    const int n = static_cast<int>(vertices.size());
    for (const auto& f : faces)
      for (int k : f)
        if (k < 0 || k >= n)
          throw ValidationError(strfmt(
              "validation: object %d mesh face index out of range", object_id));
  }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& v : vertices) c += v;
    return vertices.empty() ? c : Vec3(c / double(vertices.size()));
  }

  double bounding_radius(const Vec3& center) const {
    double r = 0.0;
    for (const auto& v : vertices) r = std::max(r, (v - center).norm());
    return r;
  }
};

// ASCII PLY with "x y z red green blue" vertices and triangle faces.
inline ObjectMesh read_ply_mesh(const std::filesystem::path& path,
                                int object_id = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open PLY: " + path.string());

  std::string line;
  size_t n_verts = 0, n_faces = 0;
  bool header_done = false;
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
      if (what == "face") n_faces = count;
    } else if (tok == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw IoError("PLY header missing end_header: " + path.string());

  ObjectMesh mesh;
  mesh.object_id = object_id;
  mesh.vertices.reserve(n_verts);
  mesh.colors.reserve(n_verts);
  for (size_t i = 0; i < n_verts; ++i) {
    double x, y, z;
    int r, g, b;
    if (!(in >> x >> y >> z >> r >> g >> b))
      throw IoError(strfmt("PLY vertex %zu malformed: %s", i,
                           path.string().c_str()));
    mesh.vertices.emplace_back(x, y, z);
    mesh.colors.emplace_back(r / 255.0, g / 255.0, b / 255.0);
  }
  for (size_t i = 0; i < n_faces; ++i) {
    int cnt, a, b, c;
    if (!(in >> cnt >> a >> b >> c) || cnt != 3)
      throw IoError(strfmt("PLY face %zu malformed (triangles only): %s", i,
                           path.string().c_str()));
    mesh.faces.push_back({a, b, c});
  }
  mesh.validate();
  return mesh;
}

inline void write_ply_mesh(const std::filesystem::path& path,
                           const ObjectMesh& mesh) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open PLY for writing: " + path.string());
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << mesh.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << mesh.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  out.precision(17);
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    const Vec3& c = mesh.colors[i];
    auto q = [](double x) {
      return std::min(255, std::max(0, int(std::lround(x * 255.0))));
    };
    out << v.x() << " " << v.y() << " " << v.z() << " " << q(c.x()) << " "
        << q(c.y()) << " " << q(c.z()) << "\n";
  }
  for (const auto& f : mesh.faces)
    out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
  if (!out) throw IoError("failed writing PLY: " + path.string());
}

// Icosphere of the given radius centered at the origin. Colors default to a
// smooth position-derived gradient so rendered output has visible texture.
inline ObjectMesh make_icosphere(double radius, int subdivisions = 2,
                                 int object_id = 1) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {
      {-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0},
      {0, -1, phi}, {0, 1, phi},  {0, -1, -phi}, {0, 1, -phi},
      {phi, 0, -1}, {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Vec3 m = (verts[a] + verts[b]).normalized();
      verts.push_back(m);
      int idx = static_cast<int>(verts.size()) - 1;
      midpoint[key] = idx;
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }

  ObjectMesh mesh;
  mesh.object_id = object_id;
  mesh.vertices.reserve(verts.size());
  mesh.colors.reserve(verts.size());
  for (const auto& v : verts) {
    mesh.vertices.push_back(v * radius);
    mesh.colors.emplace_back(0.5 + 0.5 * v.x(), 0.5 + 0.5 * v.y(),
                             0.5 + 0.5 * v.z());
  }
  mesh.faces = faces;
  return mesh;
}

inline ObjectMesh make_box_mesh(const Vec3& half_extent, int object_id = 1,
                                const Vec3& color = Vec3(0.8, 0.3, 0.2)) {
  ObjectMesh mesh;
  mesh.object_id = object_id;
  for (int i = 0; i < 8; ++i) {
    Vec3 s((i & 1) ? 1 : -1, (i & 2) ? 1 : -1, (i & 4) ? 1 : -1);
    mesh.vertices.push_back(s.cwiseProduct(half_extent));
    mesh.colors.push_back(color);
  }
  // 12 triangles, outward winding not required by the voxel fill
  mesh.faces = {{0, 1, 3}, {0, 3, 2}, {4, 6, 7}, {4, 7, 5},
                {0, 4, 5}, {0, 5, 1}, {2, 3, 7}, {2, 7, 6},
                {0, 2, 6}, {0, 6, 4}, {1, 5, 7}, {1, 7, 3}};
  return mesh;
}

}  // namespace simloop
