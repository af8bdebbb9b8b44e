#pragma once

#include <random>
#include <vector>

#include "dglue/geometry.hpp"
#include "dglue/graph.hpp"
#include "dglue/model.hpp"

namespace testing_util {

using namespace dglue;

inline Camera test_camera(double f = 500.0, int w = 640, int h = 480) {
  Camera c;
  c.K << f, 0.0, (w - 1) / 2.0, 0.0, f, (h - 1) / 2.0, 0.0, 0.0, 1.0;
  c.width = w;
  c.height = h;
  return c;
}

inline RigidTransform random_pose(std::mt19937_64& rng, double max_angle = 0.3,
                                  double trans = 1.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RigidTransform T;
  T.R = rotation_from_axis_angle(max_angle * Vec3(u(rng), u(rng), u(rng)) / std::sqrt(3.0));
  T.t = trans * Vec3(u(rng), u(rng), u(rng));
  return T;
}

// Two-view rig: points in front of camera A, x_b = T_b_a x_a.
struct Rig {
  Camera cam_a, cam_b;
  RigidTransform T_b_a;
  std::vector<Vec3> points;  // camera-A frame
  std::vector<Vec2> px_a, px_b;
};

inline Rig make_rig(std::mt19937_64& rng, int n, double trans = 1.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> depth(4.0, 12.0);
  Rig r;
  r.cam_a = test_camera();
  r.cam_b = test_camera(450.0);
  r.T_b_a = random_pose(rng, 0.2, trans);
  while (static_cast<int>(r.points.size()) < n) {
    const double z = depth(rng);
    const Vec3 p(u(rng) * 0.5 * z, u(rng) * 0.4 * z, z);
    const Vec3 q = r.T_b_a.apply(p);
    if (q.z() < 1.0) continue;
    r.points.push_back(p);
    r.px_a.push_back(r.cam_a.project(p));
    r.px_b.push_back(r.cam_b.project(q));
  }
  return r;
}

inline Eigen::VectorXd random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = g(rng);
  return v.normalized();
}

inline ImageFrame random_frame(std::mt19937_64& rng, int n, int dim, double timestamp = 0.0) {
  std::uniform_real_distribution<double> ux(0.0, 639.0), uy(0.0, 479.0);
  ImageFrame f;
  f.camera = test_camera();
  f.timestamp = timestamp;
  for (int i = 0; i < n; ++i) f.keypoints.push_back({Vec2(ux(rng), uy(rng)), random_unit(rng, dim), i});
  return f;
}

// Frame B shares A's descriptors up to noise and reordering.
inline std::pair<ImageFrame, ImageFrame> correlated_frames(std::mt19937_64& rng, int n, int dim,
                                                           double noise = 0.3) {
  ImageFrame a = random_frame(rng, n, dim, 0.0);
  ImageFrame b = random_frame(rng, n, dim, 0.1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd d = a.keypoints[(i * 7 + 3) % n].descriptor;
    for (int k = 0; k < dim; ++k) d(k) += noise * g(rng) / std::sqrt(double(dim));
    b.keypoints[i].descriptor = d.normalized();
  }
  return {a, b};
}

}  // namespace testing_util
