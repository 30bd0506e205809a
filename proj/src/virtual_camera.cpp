// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/virtual_camera.hpp>

#include <cmath>
#include <limits>

namespace endosplat {

Quat slerp(const Quat& q1, const Quat& q2_in, double alpha) {
  Quat q2 = q2_in;
  double d = q1.dot(q2);
  if (d < 0.0) {
    q2 = -q2;
    d = -d;
  }
  d = std::min(1.0, d);
  const double theta = std::acos(d);
  if (theta < 1e-6) return normalized_quat((1.0 - alpha) * q1 + alpha * q2);
  const double s = std::sin(theta);
  const Quat q = (std::sin((1.0 - alpha) * theta) / s) * q1 + (std::sin(alpha * theta) / s) * q2;
  return q / q.norm();
}

Camera make_virtual(const Camera& view_a, const Camera& view_b, double alpha) {
  const Vec3 center = (1.0 - alpha) * view_a.center() + alpha * view_b.center();
  // Camera-to-world rotation of a COLMAP pose is the conjugate quaternion.
  const Quat c2w = slerp(quat_conjugate(normalized_quat(view_a.qvec)), quat_conjugate(normalized_quat(view_b.qvec)), alpha);
  return Camera::from_center(center, quat_to_matrix(c2w), view_a.fx, view_a.fy, view_a.cx, view_a.cy, view_a.width,
                             view_a.height);
}

int nearest_view(std::span<const Camera> views, int i) {
  const Vec3 c = views[static_cast<std::size_t>(i)].center();
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < views.size(); ++k) {
    if (static_cast<int>(k) == i) continue;
    const double d = (views[k].center() - c).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

VirtualView sample_virtual(std::span<const Camera> views, std::mt19937_64& rng) {
  if (views.size() < 2) throw ConfigError("virtual views need at least 2 training views");
  std::uniform_int_distribution<int> pick(0, static_cast<int>(views.size()) - 1);
  std::uniform_real_distribution<double> draw(kVirtualAlphaMin, kVirtualAlphaMax);
  VirtualView v;
  v.parent_a = pick(rng);
  v.parent_b = nearest_view(views, v.parent_a);
  v.alpha = draw(rng);
  v.camera = make_virtual(views[static_cast<std::size_t>(v.parent_a)], views[static_cast<std::size_t>(v.parent_b)], v.alpha);
  return v;
}

}  // namespace endosplat
