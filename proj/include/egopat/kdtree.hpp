#pragma once

#include "egopat/geometry.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace egopat {

/// Static 3-d tree over a set of positions. Indices returned refer to the
/// order the positions were supplied in.
class KdTree {
public:
    KdTree() = default;
    explicit KdTree(std::vector<Vec3> positions);
    explicit KdTree(const PointCloud& cloud);

    std::size_t size() const { return positions_.size(); }
    const Vec3& position(std::size_t i) const { return positions_[i]; }

    struct Hit {
        std::uint32_t index = 0;
        double dist2 = 0.0;
    };

    /// Nearest neighbour within `max_dist`; returns false if none.
    bool nearest(const Vec3& query, double max_dist, Hit& hit) const;

    /// k nearest neighbours sorted by distance (ties broken by index).
    std::vector<Hit> knn(const Vec3& query, std::size_t k) const;

private:
    struct Node {
        std::uint32_t begin = 0, end = 0;  // leaf range into order_
        std::int32_t left = -1, right = -1;
        int axis = -1;
        double split = 0.0;
    };

    std::int32_t build(std::uint32_t begin, std::uint32_t end);
    void search_nearest(std::int32_t node, const Vec3& q, Hit& best, bool& found) const;
    void search_knn(std::int32_t node, const Vec3& q, std::size_t k, std::vector<Hit>& heap) const;

    std::vector<Vec3> positions_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
    std::int32_t root_ = -1;
};

}  // namespace egopat
