#pragma once

// Divide-and-conquer line detector: 8-connected clustering of transition
// pixels, recursive total-least-squares splitting of each cluster until
// the perpendicular residual matches the expected line width, then
// collinear chaining of the accepted leaf segments.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "dottuner/core.hpp"
#include "dottuner/geometry.hpp"
#include "dottuner/signal.hpp"

namespace dottuner {

struct HoughParams {
    int min_cluster {5};            ///< smaller 8-connected clusters are noise
    double residual_factor {1.0};   ///< split while RMS > factor * width_prior
    ReconstructionParams recon;
};

// ============================================================================
// Clustering
// ============================================================================

/// 8-connected group of active pixels with its bounding box.
struct PixelCluster {
    std::vector<PixelPoint> points;  ///< row-major scan order
    int min_col {0}, max_col {0}, min_row {0}, max_row {0};
};

/// Single-linkage clustering at 8-connectivity (pixels closer than ~sqrt(2)
/// join). Clusters below min_cluster pixels are dropped. Cluster order and
/// point order follow the row-major scan, so results are deterministic.
inline std::vector<PixelCluster> cluster_points(const TransitionMap& map, int min_cluster = 5) {
    const int rows = map.mask.rows();
    const int cols = map.mask.cols();
    const auto idx = [cols](int r, int c) { return static_cast<std::size_t>(r) * cols + c; };

    detail::UnionFind uf(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (!map.mask(r, c))
                continue;
            if (c > 0 && map.mask(r, c - 1))
                uf.unite(idx(r, c), idx(r, c - 1));
            if (r > 0) {
                for (int dc = -1; dc <= 1; ++dc) {
                    const int cc = c + dc;
                    if (cc >= 0 && cc < cols && map.mask(r - 1, cc))
                        uf.unite(idx(r, c), idx(r - 1, cc));
                }
            }
        }
    }

    std::vector<int> cluster_of(static_cast<std::size_t>(rows) * cols, -1);
    std::vector<PixelCluster> clusters;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (!map.mask(r, c))
                continue;
            const std::size_t root = uf.find(idx(r, c));
            int k = cluster_of[root];
            if (k < 0) {
                k = static_cast<int>(clusters.size());
                cluster_of[root] = k;
                clusters.push_back({{}, c, c, r, r});
            }
            auto& cl = clusters[static_cast<std::size_t>(k)];
            cl.points.push_back({c, r});
            cl.min_col = std::min(cl.min_col, c);
            cl.max_col = std::max(cl.max_col, c);
            cl.min_row = std::min(cl.min_row, r);
            cl.max_row = std::max(cl.max_row, r);
        }
    }

    std::vector<PixelCluster> kept;
    for (auto& cl : clusters)
        if (static_cast<int>(cl.points.size()) >= min_cluster)
            kept.push_back(std::move(cl));
    return kept;
}

// ============================================================================
// Recursive splitting
// ============================================================================

/// Node of the divide-and-conquer tree. Leaves either carry an accepted
/// segment or were discarded (undersized / degenerate partition).
struct SplitNode {
    std::vector<PixelPoint> points;
    std::optional<Segment> segment;  ///< present when a fit was attempted
    bool accepted {false};
    std::unique_ptr<SplitNode> lo, hi;  ///< children partition points

    [[nodiscard]] bool leaf() const { return !lo && !hi; }
};

namespace detail {

inline std::unique_ptr<SplitNode> split_node(std::vector<PixelPoint> pts,
                                             const HoughParams& p) {
    auto node = std::make_unique<SplitNode>();
    node->points = std::move(pts);
    if (static_cast<int>(node->points.size()) < p.min_cluster)
        return node;  // discarded leaf

    const Segment fit = fit_segment(node->points, p.recon.width_prior);
    node->segment = fit;
    if (fit.rms_residual <= p.residual_factor * p.recon.width_prior) {
        node->accepted = true;
        return node;
    }

    // Split at the median projection onto the fitted axis.
    std::vector<double> t(node->points.size());
    const Vec2 origin = fit.p0;
    for (std::size_t i = 0; i < node->points.size(); ++i) {
        const Vec2 v {static_cast<double>(node->points[i].col) - origin.x,
                      static_cast<double>(node->points[i].row) - origin.y};
        t[i] = v.dot(fit.dir);
    }
    std::vector<double> sorted_t(t);
    std::nth_element(sorted_t.begin(), sorted_t.begin() + static_cast<long>(sorted_t.size() / 2),
                     sorted_t.end());
    const double median = sorted_t[sorted_t.size() / 2];

    std::vector<PixelPoint> lo_pts, hi_pts;
    for (std::size_t i = 0; i < node->points.size(); ++i)
        (t[i] < median ? lo_pts : hi_pts).push_back(node->points[i]);
    if (lo_pts.empty() || hi_pts.empty()) {
        // Projection collapse: cannot halve, accept the fit as-is.
        node->accepted = true;
        return node;
    }
    node->lo = split_node(std::move(lo_pts), p);
    node->hi = split_node(std::move(hi_pts), p);
    return node;
}

inline void collect_accepted(const SplitNode& node, std::vector<Segment>& out) {
    if (node.leaf()) {
        if (node.accepted && node.segment)
            out.push_back(*node.segment);
        return;
    }
    if (node.lo)
        collect_accepted(*node.lo, out);
    if (node.hi)
        collect_accepted(*node.hi, out);
}

}  // namespace detail

/// Builds the split tree of one cluster (cluster must hold at least
/// min_cluster pixels, as produced by cluster_points).
inline std::unique_ptr<SplitNode> split_cluster(const PixelCluster& cluster,
                                                const HoughParams& p = {}) {
    if (static_cast<int>(cluster.points.size()) < p.min_cluster)
        throw GeometryError("split_cluster: cluster below min_cluster");
    return detail::split_node(cluster.points, p);
}

/// Accepted leaf segments of a split tree, in tree order.
inline std::vector<Segment> accepted_segments(const SplitNode& root) {
    std::vector<Segment> out;
    detail::collect_accepted(root, out);
    return out;
}

// ============================================================================
// Detector
// ============================================================================

/// Full pipeline: cluster -> split -> accepted leaves -> collinear chains.
inline std::vector<TransitionLine> detect_lines_hough(const TransitionMap& map,
                                                      const HoughParams& p = {}) {
    std::vector<Segment> leaves;
    for (const auto& cluster : cluster_points(map, p.min_cluster)) {
        const auto tree = split_cluster(cluster, p);
        detail::collect_accepted(*tree, leaves);
    }
    return collinear_merge(std::move(leaves), p.recon);
}

}  // namespace dottuner
