// meshfuse: LiDAR-camera human mesh fitting and semantic occupancy toolkit
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meshfuse/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace meshfuse {

/// Exact nearest-neighbor index over a fixed 3D point set.
///
/// Balanced median-split kd-tree; subtrees below 32 points are scanned
/// brute-force. Immutable after construction, safe for concurrent queries.
/// Ties on distance resolve to the lowest point index, matching a
/// brute-force ascending scan.
class NNIndex {
public:
    struct Result {
        int index = -1;
        double squared_distance = std::numeric_limits<double>::infinity();
    };

    explicit NNIndex(std::vector<Vec3> points) : points_(std::move(points)) {
        if (points_.empty()) throw std::invalid_argument("NNIndex: empty point set");
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), 0);
        nodes_.reserve(points_.size() / kLeafSize * 2 + 2);
        root_ = build(0, static_cast<int>(order_.size()));
    }

    Result nearest(const Vec3& query) const {
        Result best;
        search(root_, query, best);
        return best;
    }

    std::size_t size() const { return points_.size(); }
    const Vec3& point(int i) const { return points_[static_cast<std::size_t>(i)]; }

private:
    static constexpr int kLeafSize = 32;

    struct Node {
        int axis = -1;        // -1 marks a leaf
        double split = 0.0;
        int left = -1, right = -1;
        int begin = 0, end = 0;  // range into order_ (leaves only)
    };

    int build(int begin, int end) {
        Node node;
        if (end - begin <= kLeafSize) {
            node.begin = begin;
            node.end = end;
            nodes_.push_back(node);
            return static_cast<int>(nodes_.size()) - 1;
        }

        Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
        Vec3 hi = -lo;
        for (int i = begin; i < end; ++i) {
            lo = lo.cwiseMin(points_[order_[i]]);
            hi = hi.cwiseMax(points_[order_[i]]);
        }
        int axis = 0;
        (hi - lo).maxCoeff(&axis);

        const int mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](int a, int b) {
                             if (points_[a][axis] != points_[b][axis])
                                 return points_[a][axis] < points_[b][axis];
                             return a < b;
                         });
        node.axis = axis;
        node.split = points_[order_[mid]][axis];

        nodes_.push_back(node);
        const int id = static_cast<int>(nodes_.size()) - 1;
        const int left = build(begin, mid);
        const int right = build(mid, end);
        nodes_[id].left = left;
        nodes_[id].right = right;
        return id;
    }

    void search(int id, const Vec3& q, Result& best) const {
        const Node& node = nodes_[id];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) {
                const int pi = order_[i];
                const double d2 = (points_[pi] - q).squaredNorm();
                if (d2 < best.squared_distance ||
                    (d2 == best.squared_distance && pi < best.index)) {
                    best.squared_distance = d2;
                    best.index = pi;
                }
            }
            return;
        }
        const double delta = q[node.axis] - node.split;
        const int near = delta < 0.0 ? node.left : node.right;
        const int far = delta < 0.0 ? node.right : node.left;
        search(near, q, best);
        if (delta * delta <= best.squared_distance) search(far, q, best);
    }

    std::vector<Vec3> points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

/// Brute-force scan with the same tie-break; test oracle and small-set helper.
inline NNIndex::Result nearest_brute_force(const std::vector<Vec3>& points, const Vec3& query) {
    NNIndex::Result best;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const double d2 = (points[i] - query).squaredNorm();
        if (d2 < best.squared_distance) {
            best.squared_distance = d2;
            best.index = static_cast<int>(i);
        }
    }
    return best;
}

}  // namespace meshfuse
