// Shared math aliases, error types and small utilities.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace simloop {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec3i = Eigen::Vector3i;

// CLI maps these to exit codes: validation 2, blow-up 3, I/O 4.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class SimulationBlowup : public std::runtime_error {
 public:
  explicit SimulationBlowup(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string strfmt(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list copy;
  va_copy(copy, args);
  int n = std::vsnprintf(nullptr, 0, fmt, copy);
  va_end(copy);
  std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args);
  va_end(args);
  return out;
}

inline void set_thread_count(int threads) {
#if defined(_OPENMP)
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

inline uint64_t fnv1a64(const void* data, size_t n,
                        uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hash_file_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for hashing: " + path.string());
  uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
  }
  return strfmt("%016llx", static_cast<unsigned long long>(h));
}

// Axis-aligned box; empty until extended.
struct Box3 {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  bool empty() const { return (lo.array() > hi.array()).any(); }

  void extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }

  void extend(const Box3& b) {
    if (b.empty()) return;
    extend(b.lo);
    extend(b.hi);
  }

  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 extent() const { return empty() ? Vec3::Zero() : Vec3(hi - lo); }
  double max_extent() const { return extent().maxCoeff(); }

  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= lo.array() - tol).all() &&
           (p.array() <= hi.array() + tol).all();
  }

  static Box3 unite(const Box3& a, const Box3& b) {
    Box3 u = a;
    u.extend(b);
    return u;
  }
};

inline bool finite(const Vec3& v) {
  return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z());
}

}  // namespace simloop
