// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/scene.hpp>
#include <endosplat/simulator.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace endosplat {

struct PolarDecomposition {
  Mat3 R = Mat3::Identity();
  Mat3 P = Mat3::Identity();
};

/// F = R P with R a proper rotation and P symmetric positive definite, via
/// SVD. Throws ArgumentError when det(F) <= 0.
PolarDecomposition polar_decompose(const Mat3& F);

/// Greedy max-min subset of `n` points starting at `start`. Ties go to the
/// lowest index. Throws ArgumentError when n exceeds the point count.
std::vector<int> farthest_point_sample(std::span<const Vec3> points, int n, int start);
/// As above with the start drawn from `seed`.
std::vector<int> farthest_point_sample(std::span<const Vec3> points, int n, std::uint64_t seed);

struct BindingOptions {
  int k = 4;
  /// Softmax temperature; <= 0 uses the mean neighbor distance.
  double temperature = 0.0;
  /// softmax(+d / tau) as printed in the method description instead of
  /// softmax(-d / tau).
  bool literal_sign = false;
};

/// Each Gaussian's K nearest control nodes and blend weights.
struct BindingTable {
  int k = 0;
  /// Row-major count x k.
  std::vector<int> nodes;
  std::vector<double> weights;
  std::vector<double> distances;
  double temperature = 0.0;

  std::size_t count() const { return k > 0 ? nodes.size() / static_cast<std::size_t>(k) : 0; }
};

/// Binds `positions` to the rest positions of `node_positions`.
BindingTable bind_nodes(std::span<const Vec3> positions, std::span<const Vec3> node_positions,
                  const BindingOptions& options = {});

/// Deformed positions plus full covariances for the renderer. Rotations and
/// scales in `cloud` stay at rest.
struct DeformedCloud {
  GaussianCloud cloud;
  std::vector<Mat3> covariances;
};

/// mu_j^t = sum_k w_jk (R_k (mu_j - p_k) + p_k^t), Sigma_j^t = F_j Sigma_j F_j^T
/// with F_j = sum_k w_jk F_k. Evaluated in offset form so that the rest state
/// reproduces the input exactly. Throws UsageError on size mismatch.
DeformedCloud deform_cloud(const GaussianCloud& rest, std::span<const Mat3> rest_covariances,
                           const ControlNodeSet& nodes, const BindingTable& binding);

/// Rest covariances of every Gaussian.
std::vector<Mat3> covariances(const GaussianCloud& cloud);

}  // namespace endosplat
