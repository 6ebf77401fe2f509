#pragma once

// Shared line geometry for both detectors: total-least-squares segment
// fitting with a width prior, collinear chaining of segments into
// transition lines, and gate lever-arm extraction.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "dottuner/core.hpp"

namespace dottuner {

// ============================================================================
// Points
// ============================================================================

/// Integer pixel (col = vg1 axis, row = vg2 axis).
struct PixelPoint {
    int col {0};
    int row {0};
    bool operator==(const PixelPoint&) const = default;
};

struct Vec2 {
    double x {0.0};
    double y {0.0};

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    [[nodiscard]] double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    [[nodiscard]] double norm() const { return std::hypot(x, y); }
    bool operator==(const Vec2&) const = default;
};

/// Physical location in gate space (mV on both axes).
struct PhysPoint {
    double vg1 {0.0};
    double vg2 {0.0};
};

inline PhysPoint to_physical(const Vec2& px, const MeasurementWindow& w) {
    return {w.col_to_vg1(px.x), w.row_to_vg2(px.y)};
}

// ============================================================================
// Segment
// ============================================================================

/// Straight segment fitted to a point set. angle is the axis direction in
/// [0, pi); the direction vector is canonical (x > 0, or x == 0 and y > 0).
struct Segment {
    Vec2 p0, p1;            ///< endpoints, p0 at the lower axis projection
    Vec2 dir;               ///< unit direction, canonical
    double angle {0.0};     ///< radians in [0, pi)
    double length {0.0};
    int support {0};        ///< number of fitted pixels
    double rms_residual {0.0};  ///< raw perpendicular RMS (no width prior)
    double var_angle {0.0};     ///< prior-inflated variance of the angle
    double var_offset {0.0};    ///< prior-inflated variance of the offset

    [[nodiscard]] Vec2 midpoint() const { return (p0 + p1) * 0.5; }
    [[nodiscard]] Vec2 normal() const { return {-dir.y, dir.x}; }
    /// Signed perpendicular distance of a point from the infinite line.
    [[nodiscard]] double offset_of(const Vec2& q) const { return (q - p0).dot(normal()); }
};

namespace detail {

inline void canonicalize(Vec2& dir) {
    if (dir.x < 0.0 || (dir.x == 0.0 && dir.y < 0.0)) {
        dir.x = -dir.x;
        dir.y = -dir.y;
    }
}

inline double angle_of(const Vec2& dir) {
    double a = std::atan2(dir.y, dir.x);
    if (a < 0.0)
        a += kPi;
    if (a >= kPi)
        a -= kPi;
    return a;
}

/// Difference between two axis angles, folded into [0, pi/2].
inline double axis_angle_diff(double a, double b) {
    double d = std::abs(a - b);
    d = std::fmod(d, kPi);
    return std::min(d, kPi - d);
}

}  // namespace detail

/// Total-least-squares fit through a pixel set. The width prior (expected
/// line thickness, px) is folded into the covariance as a uniform-blur
/// variance width_prior^2 / 12 on the offset. Throws GeometryError unless
/// the set holds at least 2 distinct points.
inline Segment fit_segment(const std::vector<Vec2>& pts, double width_prior) {
    const std::size_t n = pts.size();
    if (n < 2)
        throw GeometryError("fit_segment: need at least 2 points");
    bool distinct = false;
    for (std::size_t i = 1; i < n && !distinct; ++i)
        distinct = !(pts[i] == pts[0]);
    if (!distinct)
        throw GeometryError("fit_segment: all points identical");

    double mx = 0.0, my = 0.0;
    for (const auto& p : pts) {
        mx += p.x;
        my += p.y;
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);

    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (const auto& p : pts) {
        const double dx = p.x - mx;
        const double dy = p.y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }

    Vec2 dir {std::cos(0.5 * std::atan2(2.0 * sxy, sxx - syy)),
              std::sin(0.5 * std::atan2(2.0 * sxy, sxx - syy))};
    detail::canonicalize(dir);
    const Vec2 nrm {-dir.y, dir.x};

    double tmin = 0.0, tmax = 0.0, sum_t2 = 0.0, sum_d2 = 0.0;
    bool first = true;
    for (const auto& p : pts) {
        const Vec2 c {p.x - mx, p.y - my};
        const double t = c.dot(dir);
        const double dd = c.dot(nrm);
        sum_t2 += t * t;
        sum_d2 += dd * dd;
        if (first) {
            tmin = tmax = t;
            first = false;
        } else {
            tmin = std::min(tmin, t);
            tmax = std::max(tmax, t);
        }
    }

    Segment s;
    s.dir = dir;
    s.angle = detail::angle_of(dir);
    s.p0 = {mx + tmin * dir.x, my + tmin * dir.y};
    s.p1 = {mx + tmax * dir.x, my + tmax * dir.y};
    s.length = tmax - tmin;
    s.support = static_cast<int>(n);
    const double point_var = sum_d2 / static_cast<double>(n);
    const double prior_var = width_prior * width_prior / 12.0;
    s.rms_residual = std::sqrt(point_var);
    s.var_offset = point_var + prior_var;
    s.var_angle = sum_t2 > 0.0 ? (point_var + prior_var) / sum_t2 : 0.0;
    return s;
}

inline Segment fit_segment(const std::vector<PixelPoint>& pts, double width_prior) {
    std::vector<Vec2> v;
    v.reserve(pts.size());
    for (const auto& p : pts)
        v.push_back({static_cast<double>(p.col), static_cast<double>(p.row)});
    return fit_segment(v, width_prior);
}

// ============================================================================
// Reconstruction
// ============================================================================

struct ReconstructionParams {
    double angle_tol {10.0 * kPi / 180.0};  ///< linkability angle gate, radians
    double offset_tol {3.0};                ///< endpoint-to-line distance gate, px
    double gap_max {15.0};                  ///< nearest endpoint gap gate, px
    double width_prior {3.5};               ///< expected line thickness, px
    int min_line_support {12};              ///< lines spanning fewer pixels are dropped
};

/// Chain of collinear segments ordered along the dominant axis.
struct TransitionLine {
    std::vector<Segment> segments;
    Vec2 e0, e1;               ///< extremal endpoints along the axis
    double axis_angle {0.0};   ///< support-weighted axis, radians in [0, pi)
    int support {0};           ///< summed segment support
    double mean_slope {0.0};   ///< d(row)/d(col) of the axis; +-inf when vertical

    [[nodiscard]] Vec2 midpoint() const { return (e0 + e1) * 0.5; }
};

/// True when two segments may belong to one transition line: near-parallel,
/// mutually collinear (all endpoint-to-other-line distances small) and with
/// a nearest endpoint gap below gap_max.
inline bool linkable(const Segment& a, const Segment& b, const ReconstructionParams& p) {
    if (detail::axis_angle_diff(a.angle, b.angle) >= p.angle_tol)
        return false;
    for (const auto& e : {b.p0, b.p1})
        if (std::abs(a.offset_of(e)) >= p.offset_tol)
            return false;
    for (const auto& e : {a.p0, a.p1})
        if (std::abs(b.offset_of(e)) >= p.offset_tol)
            return false;
    double gap = (a.p0 - b.p0).norm();
    gap = std::min(gap, (a.p0 - b.p1).norm());
    gap = std::min(gap, (a.p1 - b.p0).norm());
    gap = std::min(gap, (a.p1 - b.p1).norm());
    return gap < p.gap_max;
}

namespace detail {

class UnionFind {
public:
    explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) {
        std::iota(parent_.begin(), parent_.end(), std::size_t {0});
    }
    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b)
            return;
        if (rank_[a] < rank_[b])
            std::swap(a, b);
        parent_[b] = a;
        if (rank_[a] == rank_[b])
            ++rank_[a];
    }

private:
    std::vector<std::size_t> parent_;
    std::vector<std::size_t> rank_;
};

inline bool segment_order(const Segment& a, const Segment& b) {
    if (a.support != b.support)
        return a.support > b.support;
    if (a.length != b.length)
        return a.length > b.length;
    if (a.p0.x != b.p0.x)
        return a.p0.x < b.p0.x;
    if (a.p0.y != b.p0.y)
        return a.p0.y < b.p0.y;
    if (a.p1.x != b.p1.x)
        return a.p1.x < b.p1.x;
    return a.p1.y < b.p1.y;
}

inline TransitionLine build_line(std::vector<Segment> segs) {
    // Support-weighted axis via doubled-angle averaging (orientation-safe).
    double cx = 0.0, cy = 0.0;
    for (const auto& s : segs) {
        const double w = static_cast<double>(s.support);
        cx += w * std::cos(2.0 * s.angle);
        cy += w * std::sin(2.0 * s.angle);
    }
    double axis = 0.5 * std::atan2(cy, cx);
    if (axis < 0.0)
        axis += kPi;
    Vec2 dir {std::cos(axis), std::sin(axis)};
    canonicalize(dir);
    axis = angle_of(dir);

    std::sort(segs.begin(), segs.end(), [&](const Segment& a, const Segment& b) {
        const double ta = a.midpoint().dot(dir);
        const double tb = b.midpoint().dot(dir);
        if (ta != tb)
            return ta < tb;
        return segment_order(a, b);
    });

    TransitionLine line;
    bool first = true;
    double tmin = 0.0, tmax = 0.0;
    for (const auto& s : segs) {
        line.support += s.support;
        for (const auto& e : {s.p0, s.p1}) {
            const double t = e.dot(dir);
            if (first || t < tmin) {
                tmin = t;
                line.e0 = e;
            }
            if (first || t > tmax) {
                tmax = t;
                line.e1 = e;
            }
            first = false;
        }
    }
    line.axis_angle = axis;
    line.mean_slope = dir.x != 0.0
                          ? dir.y / dir.x
                          : std::numeric_limits<double>::infinity();
    line.segments = std::move(segs);
    return line;
}

}  // namespace detail

/// Merges segments into transition lines by transitive closure of
/// linkable(); every segment lands in exactly one chain. Chains whose total
/// support falls below min_line_support are dropped. Output and each
/// chain's segment order are deterministic and independent of input order.
inline std::vector<TransitionLine> collinear_merge(std::vector<Segment> segments,
                                                   const ReconstructionParams& p = {}) {
    std::sort(segments.begin(), segments.end(), detail::segment_order);
    const std::size_t n = segments.size();
    detail::UnionFind uf(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (linkable(segments[i], segments[j], p))
                uf.unite(i, j);

    std::vector<std::vector<Segment>> groups(n);
    for (std::size_t i = 0; i < n; ++i)
        groups[uf.find(i)].push_back(segments[i]);

    std::vector<TransitionLine> lines;
    for (auto& g : groups) {
        if (g.empty())
            continue;
        TransitionLine line = detail::build_line(std::move(g));
        if (line.support >= p.min_line_support)
            lines.push_back(std::move(line));
    }
    std::sort(lines.begin(), lines.end(), [](const TransitionLine& a, const TransitionLine& b) {
        if (a.support != b.support)
            return a.support > b.support;
        if (a.e0.x != b.e0.x)
            return a.e0.x < b.e0.x;
        return a.e0.y < b.e0.y;
    });
    return lines;
}

// ============================================================================
// Lever arm
// ============================================================================

/// Gate lever-arm ratio -d(vg2)/d(vg1) along a line's axis, using the
/// window's per-axis resolutions. Positive for transition-like lines
/// (vg1 shrinking as vg2 grows). Throws GeometryError for lines vertical
/// in gate space (no vg1 extent).
inline double lever_arm_ratio(const TransitionLine& line, const MeasurementWindow& w) {
    const double dvg1 = (line.e1.x - line.e0.x) * w.vg1_step;
    const double dvg2 = (line.e1.y - line.e0.y) * w.vg2_step;
    if (std::abs(dvg1) < 1e-12 * std::max(1.0, std::abs(dvg2)))
        throw GeometryError("lever_arm_ratio: line is vertical in gate space");
    return -dvg2 / dvg1;
}

/// Linear extrapolation of the line's vg1 locus to a given vg2.
/// Throws GeometryError for lines without vg2 extent.
inline double vg1_at_vg2(const TransitionLine& line, const MeasurementWindow& w, double vg2) {
    const PhysPoint a = to_physical(line.e0, w);
    const PhysPoint b = to_physical(line.e1, w);
    const double dvg2 = b.vg2 - a.vg2;
    if (std::abs(dvg2) < 1e-12 * std::max(1.0, std::abs(b.vg1 - a.vg1)))
        throw GeometryError("vg1_at_vg2: line has no vg2 extent");
    return a.vg1 + (vg2 - a.vg2) * (b.vg1 - a.vg1) / dvg2;
}

}  // namespace dottuner
