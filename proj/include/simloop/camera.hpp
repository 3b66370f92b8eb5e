// Pinhole camera: world-to-camera extrinsics, projection, back-projection.
#pragma once

#include <cmath>

#include "simloop/core.hpp"

namespace simloop {

struct CameraFrame {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  Mat3 R = Mat3::Identity();  // world to camera
  Vec3 t = Vec3::Zero();
  int width = 0, height = 0;
  int frame_index = 0;

  void validate() const {
    if (fx <= 0 || fy <= 0)
      throw ValidationError(
          strfmt("validation: camera frame %d has non-positive focal length",
                 frame_index));
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
      throw ValidationError(strfmt(
          "validation: camera frame %d principal point outside image",
          frame_index));
    Mat3 rtr = R.transpose() * R - Mat3::Identity();
    if (rtr.cwiseAbs().maxCoeff() > 1e-6 || std::abs(R.determinant() - 1.0) > 1e-6)
      throw ValidationError(strfmt(
          "validation: camera frame %d rotation not orthonormal", frame_index));
  }

  Vec3 to_camera(const Vec3& xw) const { return R * xw + t; }

  // Returns false when the point is at or behind the camera plane.
  bool project(const Vec3& xw, Vec2& px, double& depth) const {
    Vec3 xc = to_camera(xw);
    if (xc.z() <= 0) return false;
    px = Vec2(fx * xc.x() / xc.z() + cx, fy * xc.y() / xc.z() + cy);
    depth = xc.z();
    return true;
  }

  Vec3 back_project(double u, double v, double depth) const {
    Vec3 xc(depth * (u - cx) / fx, depth * (v - cy) / fy, depth);
    return R.transpose() * (xc - t);
  }

  Vec3 center() const { return -(R.transpose() * t); }
  Vec3 view_axis_world() const { return R.transpose() * Vec3(0, 0, 1); }

  bool in_image(const Vec2& px) const {
    return px.x() >= 0 && px.x() < width && px.y() >= 0 && px.y() < height;
  }
};

}  // namespace simloop
