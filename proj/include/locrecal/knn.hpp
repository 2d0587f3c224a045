#ifndef LOCRECAL_KNN_HPP
#define LOCRECAL_KNN_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "locrecal/errors.hpp"

namespace locrecal {

/// n points of dimension d stored row-major, each with a unique integer id.
class PointSet {
 public:
  PointSet(std::vector<double> coords, std::size_t dim, std::vector<std::size_t> ids)
      : coords_(std::move(coords)), dim_(dim), ids_(std::move(ids)) {
    if (dim_ == 0) throw DomainError("PointSet: dimension must be >= 1");
    if (coords_.size() % dim_ != 0) throw DomainError("PointSet: coordinate count not a multiple of dim");
    if (coords_.empty()) throw DomainError("PointSet: empty point set");
    if (ids_.size() != coords_.size() / dim_) throw DomainError("PointSet: ids/points length mismatch");
    for (double c : coords_)
      if (!std::isfinite(c)) throw DomainError("PointSet: non-finite coordinate");
    std::vector<std::size_t> sorted = ids_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw DomainError("PointSet: ids must be unique");
  }

  /// Ids default to 0..n-1.
  PointSet(std::vector<double> coords, std::size_t dim)
      : PointSet(coords, dim, iota_ids(dim == 0 ? 0 : coords.size() / dim)) {}

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  std::span<const double> row(std::size_t i) const { return {coords_.data() + i * dim_, dim_}; }
  std::size_t id(std::size_t i) const { return ids_[i]; }

 private:
  static std::vector<std::size_t> iota_ids(std::size_t n) {
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return ids;
  }

  std::vector<double> coords_;
  std::size_t dim_;
  std::vector<std::size_t> ids_;
};

struct Neighbor {
  std::size_t id;
  double distance;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Ascending by distance, ties by id.
using NeighborList = std::vector<Neighbor>;

struct QueryStats {
  std::size_t nodes_visited = 0;
  std::size_t nodes_pruned = 0;
  std::size_t distance_evals = 0;
};

inline constexpr std::size_t kDefaultLeafSize = 16;

/// Balanced KD-tree over a PointSet, Euclidean metric. Immutable after
/// construction; queries are const and may run concurrently.
class KdTree {
 public:
  struct Node {
    std::size_t begin = 0;  // range into the permuted point order
    std::size_t end = 0;
    int split_dim = -1;     // -1 for leaves
    double split_value = 0.0;
    std::size_t left = 0;
    std::size_t right = 0;

    bool is_leaf() const { return split_dim < 0; }
  };

  explicit KdTree(const PointSet& points, std::size_t leaf_size = kDefaultLeafSize)
      : dim_(points.dim()), leaf_size_(leaf_size) {
    if (leaf_size_ == 0) throw DomainError("KdTree: leaf_size must be >= 1");
    const std::size_t n = points.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    // Build on input positions, then lay points out contiguously in leaf order.
    nodes_.reserve(2 * (n / leaf_size_ + 1));
    build(points, order, 0, n, 0);

    coords_.resize(n * dim_);
    ids_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = points.row(order[i]);
      std::copy(r.begin(), r.end(), coords_.begin() + static_cast<std::ptrdiff_t>(i * dim_));
      ids_[i] = points.id(order[i]);
    }
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t leaf_size() const { return leaf_size_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t depth() const { return depth_; }

  /// Ids held by a leaf node.
  std::vector<std::size_t> leaf_ids(const Node& leaf) const {
    return {ids_.begin() + static_cast<std::ptrdiff_t>(leaf.begin),
            ids_.begin() + static_cast<std::ptrdiff_t>(leaf.end)};
  }

  /// Bounding box of a node (lower corner, upper corner).
  std::pair<std::span<const double>, std::span<const double>> bounds(std::size_t node) const {
    return {{box_lo_.data() + node * dim_, dim_}, {box_hi_.data() + node * dim_, dim_}};
  }

  /// k nearest neighbors. With eps > 0 the i-th returned distance is at most
  /// (1 + eps) times the true i-th nearest distance.
  NeighborList query_knn(std::span<const double> q, std::size_t k, double eps = 0.0,
                         QueryStats* stats = nullptr) const {
    check_query(q);
    if (k == 0) throw DomainError("query_knn: k must be >= 1");
    if (k > size()) throw DomainError("query_knn: k exceeds the number of indexed points");
    if (!(eps >= 0.0) || !std::isfinite(eps)) throw DomainError("query_knn: eps must be >= 0");

    KnnSearch search{*this, q, k, (1.0 + eps) * (1.0 + eps), {}, stats};
    search.visit(0);
    NeighborList out;
    out.reserve(k);
    while (!search.heap.empty()) {
      out.push_back({search.heap.top().second, std::sqrt(search.heap.top().first)});
      search.heap.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  /// All points within distance r (inclusive), ascending.
  NeighborList query_radius(std::span<const double> q, double r, QueryStats* stats = nullptr) const {
    check_query(q);
    if (!(r > 0.0) || !std::isfinite(r)) throw DomainError("query_radius: r must be > 0");
    std::vector<std::pair<double, std::size_t>> hits;
    radius_visit(0, q, r * r, hits, stats);
    std::sort(hits.begin(), hits.end());
    NeighborList out;
    out.reserve(hits.size());
    for (const auto& [d2, id] : hits) out.push_back({id, std::sqrt(d2)});
    return out;
  }

 private:
  using Entry = std::pair<double, std::size_t>;  // (squared distance, id)

  struct KnnSearch {
    const KdTree& tree;
    std::span<const double> q;
    std::size_t k;
    double prune_factor;  // (1 + eps)^2
    std::priority_queue<Entry> heap;  // max-heap on (d2, id)
    QueryStats* stats;

    void visit(std::size_t node_index) {
      const Node& node = tree.nodes_[node_index];
      if (stats) ++stats->nodes_visited;
      if (node.is_leaf()) {
        for (std::size_t i = node.begin; i < node.end; ++i) {
          const Entry e{tree.squared_distance(i, q), tree.ids_[i]};
          if (stats) ++stats->distance_evals;
          if (heap.size() < k) {
            heap.push(e);
          } else if (e < heap.top()) {
            heap.pop();
            heap.push(e);
          }
        }
        return;
      }
      const double dl = tree.box_distance2(node.left, q);
      const double dr = tree.box_distance2(node.right, q);
      const bool left_first = dl <= dr;
      descend(left_first ? node.left : node.right, left_first ? dl : dr);
      descend(left_first ? node.right : node.left, left_first ? dr : dl);
    }

    void descend(std::size_t child, double box_d2) {
      if (heap.size() == k && box_d2 * prune_factor > heap.top().first) {
        if (stats) ++stats->nodes_pruned;
        return;
      }
      visit(child);
    }
  };

  void check_query(std::span<const double> q) const {
    if (q.size() != dim_)
      throw DomainError("query dimension " + std::to_string(q.size()) + " != index dimension " +
                        std::to_string(dim_));
    for (double c : q)
      if (!std::isfinite(c)) throw DomainError("query point has a non-finite coordinate");
  }

  double squared_distance(std::size_t slot, std::span<const double> q) const {
    const double* p = coords_.data() + slot * dim_;
    double s = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) {
      const double diff = p[j] - q[j];
      s += diff * diff;
    }
    return s;
  }

  double box_distance2(std::size_t node, std::span<const double> q) const {
    const double* lo = box_lo_.data() + node * dim_;
    const double* hi = box_hi_.data() + node * dim_;
    double s = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) {
      double diff = 0.0;
      if (q[j] < lo[j]) {
        diff = lo[j] - q[j];
      } else if (q[j] > hi[j]) {
        diff = q[j] - hi[j];
      }
      s += diff * diff;
    }
    return s;
  }

  void radius_visit(std::size_t node_index, std::span<const double> q, double r2,
                    std::vector<Entry>& hits, QueryStats* stats) const {
    const Node& node = nodes_[node_index];
    if (box_distance2(node_index, q) > r2) {
      if (stats) ++stats->nodes_pruned;
      return;
    }
    if (stats) ++stats->nodes_visited;
    if (node.is_leaf()) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const double d2 = squared_distance(i, q);
        if (stats) ++stats->distance_evals;
        if (d2 <= r2) hits.emplace_back(d2, ids_[i]);
      }
      return;
    }
    radius_visit(node.left, q, r2, hits, stats);
    radius_visit(node.right, q, r2, hits, stats);
  }

  std::size_t build(const PointSet& points, std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t end, std::size_t level) {
    const std::size_t index = nodes_.size();
    nodes_.push_back(Node{begin, end});
    depth_ = std::max(depth_, level);

    // Bounding box and widest dimension over this range.
    box_lo_.resize((index + 1) * dim_, std::numeric_limits<double>::infinity());
    box_hi_.resize((index + 1) * dim_, -std::numeric_limits<double>::infinity());
    for (std::size_t i = begin; i < end; ++i) {
      const auto r = points.row(order[i]);
      for (std::size_t j = 0; j < dim_; ++j) {
        box_lo_[index * dim_ + j] = std::min(box_lo_[index * dim_ + j], r[j]);
        box_hi_[index * dim_ + j] = std::max(box_hi_[index * dim_ + j], r[j]);
      }
    }
    if (end - begin <= leaf_size_) return index;

    std::size_t split_dim = 0;
    double widest = -1.0;
    for (std::size_t j = 0; j < dim_; ++j) {
      const double spread = box_hi_[index * dim_ + j] - box_lo_[index * dim_ + j];
      if (spread > widest) {
        widest = spread;
        split_dim = j;
      }
    }

    const std::size_t mid = begin + (end - begin) / 2;
    auto less = [&](std::size_t a, std::size_t b) {
      const double ca = points.row(a)[split_dim];
      const double cb = points.row(b)[split_dim];
      return ca < cb || (ca == cb && a < b);
    };
    std::nth_element(order.begin() + static_cast<std::ptrdiff_t>(begin),
                     order.begin() + static_cast<std::ptrdiff_t>(mid),
                     order.begin() + static_cast<std::ptrdiff_t>(end), less);

    nodes_[index].split_dim = static_cast<int>(split_dim);
    nodes_[index].split_value = points.row(order[mid])[split_dim];
    const std::size_t left = build(points, order, begin, mid, level + 1);
    const std::size_t right = build(points, order, mid, end, level + 1);
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
  }

  std::size_t dim_;
  std::size_t leaf_size_;
  std::size_t depth_ = 0;
  std::vector<Node> nodes_;
  std::vector<double> box_lo_;
  std::vector<double> box_hi_;
  std::vector<double> coords_;
  std::vector<std::size_t> ids_;
};

/// Builds the index; thin wrapper kept for symmetry with the query functions.
inline KdTree build_index(const PointSet& points, std::size_t leaf_size = kDefaultLeafSize) {
  return KdTree(points, leaf_size);
}

}  // namespace locrecal

#endif  // LOCRECAL_KNN_HPP
