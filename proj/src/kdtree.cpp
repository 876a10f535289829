#include "egopat/kdtree.hpp"

#include <algorithm>
#include <numeric>

namespace egopat {

namespace {
constexpr std::uint32_t kLeafSize = 12;

bool hit_less(const KdTree::Hit& a, const KdTree::Hit& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}
}  // namespace

KdTree::KdTree(std::vector<Vec3> positions) : positions_(std::move(positions)) {
    order_.resize(positions_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    if (!positions_.empty()) {
        nodes_.reserve(2 * positions_.size() / kLeafSize + 2);
        root_ = build(0, static_cast<std::uint32_t>(positions_.size()));
    }
}

KdTree::KdTree(const PointCloud& cloud)
    : KdTree([&] {
          std::vector<Vec3> p;
          p.reserve(cloud.size());
          for (const auto& q : cloud) p.push_back(q.position);
          return p;
      }()) {}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.emplace_back();
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    if (end - begin <= kLeafSize) return id;

    Vec3 lo = positions_[order_[begin]], hi = lo;
    for (std::uint32_t i = begin; i < end; ++i) {
        lo = lo.cwiseMin(positions_[order_[i]]);
        hi = hi.cwiseMax(positions_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                         const double pa = positions_[a][axis], pb = positions_[b][axis];
                         return pa < pb || (pa == pb && a < b);
                     });
    const double split = positions_[order_[mid]][axis];
    const std::int32_t left = build(begin, mid);
    const std::int32_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

bool KdTree::nearest(const Vec3& query, double max_dist, Hit& hit) const {
    if (root_ < 0) return false;
    Hit best{0, max_dist * max_dist};
    bool found = false;
    search_nearest(root_, query, best, found);
    if (found) hit = best;
    return found;
}

void KdTree::search_nearest(std::int32_t id, const Vec3& q, Hit& best, bool& found) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
        for (std::uint32_t i = node.begin; i < node.end; ++i) {
            const std::uint32_t idx = order_[i];
            const double d2 = (positions_[idx] - q).squaredNorm();
            if (d2 < best.dist2 || (d2 == best.dist2 && (!found || idx < best.index))) {
                best = {idx, d2};
                found = true;
            }
        }
        return;
    }
    const double diff = q[node.axis] - node.split;
    const std::int32_t first = diff < 0.0 ? node.left : node.right;
    const std::int32_t second = diff < 0.0 ? node.right : node.left;
    search_nearest(first, q, best, found);
    if (diff * diff <= best.dist2) search_nearest(second, q, best, found);
}

std::vector<KdTree::Hit> KdTree::knn(const Vec3& query, std::size_t k) const {
    std::vector<Hit> heap;
    if (root_ < 0 || k == 0) return heap;
    heap.reserve(k + 1);
    search_knn(root_, query, std::min(k, positions_.size()), heap);
    std::sort_heap(heap.begin(), heap.end(), hit_less);
    return heap;
}

void KdTree::search_knn(std::int32_t id, const Vec3& q, std::size_t k, std::vector<Hit>& heap) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
        for (std::uint32_t i = node.begin; i < node.end; ++i) {
            const std::uint32_t idx = order_[i];
            const Hit h{idx, (positions_[idx] - q).squaredNorm()};
            if (heap.size() < k) {
                heap.push_back(h);
                std::push_heap(heap.begin(), heap.end(), hit_less);
            } else if (hit_less(h, heap.front())) {
                std::pop_heap(heap.begin(), heap.end(), hit_less);
                heap.back() = h;
                std::push_heap(heap.begin(), heap.end(), hit_less);
            }
        }
        return;
    }
    const double diff = q[node.axis] - node.split;
    const std::int32_t first = diff < 0.0 ? node.left : node.right;
    const std::int32_t second = diff < 0.0 ? node.right : node.left;
    search_knn(first, q, k, heap);
    if (heap.size() < k || diff * diff <= heap.front().dist2) search_knn(second, q, k, heap);
}

}  // namespace egopat
