// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/scene.hpp>

#include <random>
#include <span>

namespace endosplat {

/// Spherical linear interpolation along the shorter arc. Falls back to a
/// normalized lerp when the two rotations are within 1e-6 rad.
Quat slerp(const Quat& q1, const Quat& q2, double alpha);

struct VirtualView {
  Camera camera;
  double alpha = 0.5;
  int parent_a = -1;
  int parent_b = -1;
};

/// Camera whose center is lerp(center_a, center_b, alpha) and whose
/// camera-to-world orientation is slerp(R_a^T, R_b^T, alpha). Intrinsics come
/// from view_a.
Camera make_virtual(const Camera& view_a, const Camera& view_b, double alpha);

inline constexpr double kVirtualAlphaMin = 0.1;
inline constexpr double kVirtualAlphaMax = 0.9;

/// Index of the view whose camera center is nearest to view i (ties to the
/// lower index).
int nearest_view(std::span<const Camera> views, int i);

/// Uniformly picks a view, pairs it with its nearest neighbour and draws
/// alpha ~ U(0.1, 0.9). Throws ConfigError for fewer than 2 views.
VirtualView sample_virtual(std::span<const Camera> views, std::mt19937_64& rng);

}  // namespace endosplat
