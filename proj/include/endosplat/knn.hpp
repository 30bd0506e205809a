// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/math.hpp>

#include <cstddef>
#include <span>
#include <vector>

namespace endosplat {

struct Neighbor {
  int index = -1;
  double distance = 0.0;
};

/// Static k-d tree over a point set for exact k-nearest-neighbour queries.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);

  /// Up to k nearest points sorted by (distance, index). `exclude` skips one
  /// point index (pass -1 to keep all).
  std::vector<Neighbor> nearest(const Vec3& query, int k, int exclude = -1) const;

  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    int begin, end;  // range in order_
    int left = -1, right = -1;
    int axis = 0;
    double split = 0.0;
  };
  int build(int begin, int end, int depth);
  void search(int node, const Vec3& q, int k, int exclude, std::vector<Neighbor>& heap) const;

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

}  // namespace endosplat
