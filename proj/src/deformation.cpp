// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/deformation.hpp>
#include <endosplat/errors.hpp>
#include <endosplat/knn.hpp>

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace endosplat {

PolarDecomposition polar_decompose(const Mat3& F) {
  if (F == Mat3::Identity()) return {};
  const double det = F.determinant();
  if (!(det > 0.0)) throw ArgumentError("polar decomposition needs det(F) > 0");
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  Mat3 V = svd.matrixV();
  Vec3 sigma = svd.singularValues();
  if (U.determinant() < 0.0) {
    U.col(2) *= -1.0;
    sigma[2] *= -1.0;
  }
  if (V.determinant() < 0.0) {
    V.col(2) *= -1.0;
    sigma[2] *= -1.0;
  }
  PolarDecomposition out;
  out.R = U * V.transpose();
  out.P = V * sigma.asDiagonal() * V.transpose();
  out.P = 0.5 * (out.P + out.P.transpose());
  return out;
}

std::vector<int> farthest_point_sample(std::span<const Vec3> points, int n, int start) {
  const int count = static_cast<int>(points.size());
  if (n < 1) throw ArgumentError("farthest point sampling needs n >= 1");
  if (n > count) throw ArgumentError("cannot sample " + std::to_string(n) + " of " + std::to_string(count) + " points");
  if (start < 0 || start >= count) throw ArgumentError("start index out of range");
  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(n));
  std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
  int next = start;
  for (int s = 0; s < n; ++s) {
    chosen.push_back(next);
    const Vec3 c = points[static_cast<std::size_t>(next)];
    int best = -1;
    double best_d = -1.0;
    for (int i = 0; i < count; ++i) {
      double& d = dist[static_cast<std::size_t>(i)];
      d = std::min(d, (points[static_cast<std::size_t>(i)] - c).squaredNorm());
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    next = best;
  }
  return chosen;
}

std::vector<int> farthest_point_sample(std::span<const Vec3> points, int n, std::uint64_t seed) {
  if (points.empty()) throw ArgumentError("farthest point sampling needs points");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(points.size()) - 1);
  return farthest_point_sample(points, n, pick(rng));
}

BindingTable bind_nodes(std::span<const Vec3> positions, std::span<const Vec3> node_positions, const BindingOptions& options) {
  if (node_positions.empty()) throw ArgumentError("binding needs at least one control node");
  if (options.k < 1 || options.k > static_cast<int>(node_positions.size())) {
    throw ArgumentError("K must lie in [1, node count]");
  }
  const int k = options.k;
  BindingTable t;
  t.k = k;
  t.nodes.resize(positions.size() * static_cast<std::size_t>(k));
  t.weights.resize(t.nodes.size());
  t.distances.resize(t.nodes.size());
  KdTree tree(node_positions);
  double sum = 0.0;
  for (std::size_t j = 0; j < positions.size(); ++j) {
    const auto nn = tree.nearest(positions[j], k);
    for (int a = 0; a < k; ++a) {
      t.nodes[j * k + a] = nn[static_cast<std::size_t>(a)].index;
      t.distances[j * k + a] = nn[static_cast<std::size_t>(a)].distance;
      sum += nn[static_cast<std::size_t>(a)].distance;
    }
  }
  double tau = options.temperature;
  if (!(tau > 0.0)) tau = t.distances.empty() ? 1.0 : sum / static_cast<double>(t.distances.size());
  if (!(tau > 0.0)) tau = 1.0;
  t.temperature = tau;
  const double sign = options.literal_sign ? 1.0 : -1.0;
  for (std::size_t j = 0; j < positions.size(); ++j) {
    double top = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < k; ++a) top = std::max(top, sign * t.distances[j * k + a] / tau);
    double z = 0.0;
    for (int a = 0; a < k; ++a) {
      const double e = std::exp(sign * t.distances[j * k + a] / tau - top);
      t.weights[j * k + a] = e;
      z += e;
    }
    for (int a = 0; a < k; ++a) t.weights[j * k + a] /= z;
  }
  return t;
}

std::vector<Mat3> covariances(const GaussianCloud& cloud) {
  std::vector<Mat3> out(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) out[i] = covariance_of(cloud.rotations[i], cloud.scales[i]);
  return out;
}

DeformedCloud deform_cloud(const GaussianCloud& rest, std::span<const Mat3> rest_covariances,
                           const ControlNodeSet& nodes, const BindingTable& binding) {
  if (binding.count() != rest.size() || rest_covariances.size() != rest.size()) {
    throw UsageError("binding, covariances and cloud sizes differ");
  }
  const std::size_t m = nodes.size();
  std::vector<Mat3> rot_delta(m), f_delta(m);
  std::vector<Vec3> shift(m);
  for (std::size_t k = 0; k < m; ++k) {
    rot_delta[k] = polar_decompose(nodes.F[k]).R - Mat3::Identity();
    f_delta[k] = nodes.F[k] - Mat3::Identity();
    shift[k] = nodes.position[k] - nodes.rest[k];
  }
  DeformedCloud out{rest, std::vector<Mat3>(rest.size())};
  const int K = binding.k;
  for (std::size_t j = 0; j < rest.size(); ++j) {
    const Vec3& mu = rest.positions[j];
    Vec3 d_mu = Vec3::Zero();
    Mat3 Fj = Mat3::Identity();
    for (int a = 0; a < K; ++a) {
      const int node = binding.nodes[j * K + a];
      if (node < 0 || static_cast<std::size_t>(node) >= m) throw UsageError("binding refers to a missing node");
      const double w = binding.weights[j * K + a];
      d_mu += w * (rot_delta[static_cast<std::size_t>(node)] * (mu - nodes.rest[static_cast<std::size_t>(node)]) +
                   shift[static_cast<std::size_t>(node)]);
      Fj += w * f_delta[static_cast<std::size_t>(node)];
    }
    out.cloud.positions[j] = mu + d_mu;
    out.covariances[j] = Fj * rest_covariances[j] * Fj.transpose();
  }
  return out;
}

}  // namespace endosplat
