#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace sqfit {

template <int D>
using Point = Eigen::Matrix<double, D, 1>;

/// Sum of squared coordinate differences, accumulated in axis order.
template <int D>
double squared_distance(const Point<D>& a, const Point<D>& b) {
  double s = 0.0;
  for (int k = 0; k < D; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

struct Neighbor {
  std::size_t index = 0;
  double squared_distance = std::numeric_limits<double>::infinity();
};

/// Static kd-tree giving exact nearest neighbours. Among equidistant points
/// the lowest index wins, so results coincide with a brute-force scan.
template <int D>
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::vector<Point<D>> points) : points_(std::move(points)) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const std::vector<Point<D>>& points() const { return points_; }

  Neighbor nearest(const Point<D>& q) const {
    Neighbor best;
    if (!nodes_.empty()) search(0, q, best);
    return best;
  }

 private:
  static constexpr std::size_t kLeafSize = 8;

  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    std::int32_t left = -1, right = -1;
  };

  std::int32_t build(std::size_t begin, std::size_t end) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;

    Point<D> lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::size_t a, std::size_t b) {
                       const double pa = points_[a][axis], pb = points_[b][axis];
                       return pa < pb || (pa == pb && a < b);
                     });
    nodes_[id].axis = axis;
    nodes_[id].split = points_[order_[mid]][axis];
    const auto l = build(begin, mid);
    const auto r = build(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(std::int32_t id, const Point<D>& q, Neighbor& best) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d = squared_distance<D>(points_[idx], q);
        if (d < best.squared_distance || (d == best.squared_distance && idx < best.index)) best = {idx, d};
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::int32_t near = diff < 0.0 ? n.left : n.right;
    const std::int32_t far = diff < 0.0 ? n.right : n.left;
    search(near, q, best);
    // Points with coordinate == split may sit on either side, so only a strict
    // bound prunes.
    if (diff * diff <= best.squared_distance) search(far, q, best);
  }

  std::vector<Point<D>> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace sqfit
