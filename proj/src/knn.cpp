// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/knn.hpp>

#include <algorithm>
#include <numeric>

namespace endosplat {

namespace {

constexpr int kLeafSize = 12;

bool closer(const Neighbor& a, const Neighbor& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
}

}  // namespace

KdTree::KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()), order_(points.size()) {
  std::iota(order_.begin(), order_.end(), 0);
  if (!points_.empty()) build(0, static_cast<int>(points_.size()), 0);
}

int KdTree::build(int begin, int end, int depth) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= kLeafSize) return id;
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  for (int i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])]);
    hi = hi.cwiseMax(points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])]);
  }
  int axis;
  (hi - lo).maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](int a, int b) {
    return points_[static_cast<std::size_t>(a)][axis] < points_[static_cast<std::size_t>(b)][axis];
  });
  const double split = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(mid)])][axis];
  const int left = build(begin, mid, depth + 1);
  const int right = build(mid, end, depth + 1);
  nodes_[static_cast<std::size_t>(id)].axis = axis;
  nodes_[static_cast<std::size_t>(id)].split = split;
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

void KdTree::search(int node_id, const Vec3& q, int k, int exclude, std::vector<Neighbor>& heap) const {
  const Node& node = nodes_[static_cast<std::size_t>(node_id)];
  if (node.left < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      const int idx = order_[static_cast<std::size_t>(i)];
      if (idx == exclude) continue;
      const Neighbor n{idx, (points_[static_cast<std::size_t>(idx)] - q).norm()};
      if (static_cast<int>(heap.size()) < k) {
        heap.push_back(n);
        std::push_heap(heap.begin(), heap.end(), closer);
      } else if (closer(n, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), closer);
        heap.back() = n;
        std::push_heap(heap.begin(), heap.end(), closer);
      }
    }
    return;
  }
  const double diff = q[node.axis] - node.split;
  const int first = diff < 0 ? node.left : node.right;
  const int second = diff < 0 ? node.right : node.left;
  search(first, q, k, exclude, heap);
  // Ties on the splitting plane can sit on either side, hence <=.
  if (static_cast<int>(heap.size()) < k || std::abs(diff) <= heap.front().distance) {
    search(second, q, k, exclude, heap);
  }
}

std::vector<Neighbor> KdTree::nearest(const Vec3& query, int k, int exclude) const {
  std::vector<Neighbor> heap;
  if (k <= 0 || points_.empty()) return heap;
  heap.reserve(static_cast<std::size_t>(k));
  search(0, query, k, exclude, heap);
  std::sort(heap.begin(), heap.end(), closer);
  return heap;
}

}  // namespace endosplat
