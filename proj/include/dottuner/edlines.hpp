#pragma once

// Edge-drawing line detector adapted to binary transition maps: Gaussian
// smoothing turns the mask into a ridge field, anchors mark local crest
// maxima, chains are walked greedily along the ridge, segments grow by
// incremental least squares while the fit error stays bounded, and
// near-duplicate parallel segments are removed before chaining.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dottuner/core.hpp"
#include "dottuner/geometry.hpp"
#include "dottuner/signal.hpp"

namespace dottuner {

struct EdlinesParams {
    double sigma {1.0};             ///< Gaussian smoothing width, px
    double anchor_threshold {0.25}; ///< minimum crest magnitude for an anchor
    double magnitude_floor {0.1};   ///< walking stops below this magnitude
    double fit_error_max {1.5};     ///< max RMS while growing a segment, px
    int min_seg_len {8};            ///< minimum chain pixels per segment
    double doublon_angle {5.0 * kPi / 180.0};
    double doublon_overlap {0.5};   ///< fraction of the shorter segment
    ReconstructionParams recon;     ///< recon.width_prior doubles as doublon separation
};

// ============================================================================
// Smoothing and gradient field
// ============================================================================

/// Separable Gaussian blur of the binary map (zero padding, kernel
/// truncated at 3 sigma and normalized to unit sum).
inline Array2D<double> smooth_map(const TransitionMap& map, double sigma = 1.0) {
    if (!(sigma > 0.0))
        throw ConfigError("smooth_map: sigma must be > 0");
    const int rows = map.mask.rows();
    const int cols = map.mask.cols();
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        ksum += v;
    }
    for (auto& v : kernel)
        v /= ksum;

    Array2D<double> tmp(rows, cols, 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int cc = c + i;
                if (cc >= 0 && cc < cols && map.mask(r, cc))
                    acc += kernel[static_cast<std::size_t>(i + radius)];
            }
            tmp(r, c) = acc;
        }
    }
    Array2D<double> out(rows, cols, 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int rr = r + i;
                if (rr >= 0 && rr < rows)
                    acc += kernel[static_cast<std::size_t>(i + radius)] * tmp(rr, c);
            }
            out(r, c) = acc;
        }
    }
    return out;
}

/// Ridge-strength magnitude plus a quantized walk axis per pixel:
/// kWalkRows where the ridge runs vertically, kWalkCols where it runs
/// horizontally (from a forward-difference gradient of the smoothed map).
struct GradientField {
    static constexpr std::uint8_t kWalkRows = 0;
    static constexpr std::uint8_t kWalkCols = 1;

    Array2D<double> magnitude;
    Array2D<std::uint8_t> direction;
};

inline GradientField gradient_field(const Array2D<double>& smoothed) {
    const int rows = smoothed.rows();
    const int cols = smoothed.cols();
    GradientField f;
    f.magnitude = smoothed;
    f.direction = Array2D<std::uint8_t>(rows, cols, GradientField::kWalkRows);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double gx =
                cols > 1 ? smoothed(r, c + 1 < cols ? c + 1 : c - 1) - smoothed(r, c) : 0.0;
            const double gy =
                rows > 1 ? smoothed(r + 1 < rows ? r + 1 : r - 1, c) - smoothed(r, c) : 0.0;
            f.direction(r, c) = std::abs(gx) >= std::abs(gy) ? GradientField::kWalkRows
                                                             : GradientField::kWalkCols;
        }
    }
    return f;
}

// ============================================================================
// Anchors
// ============================================================================

/// Crest pixels: magnitude above threshold and not below either neighbor
/// across the local ridge axis. Sorted by magnitude (desc), then scan order.
inline std::vector<PixelPoint> extract_anchors(const GradientField& field,
                                               double threshold = 0.25) {
    const int rows = field.magnitude.rows();
    const int cols = field.magnitude.cols();
    std::vector<PixelPoint> anchors;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double m = field.magnitude(r, c);
            if (m < threshold)
                continue;
            bool crest;
            if (field.direction(r, c) == GradientField::kWalkRows) {
                const double left = c > 0 ? field.magnitude(r, c - 1) : 0.0;
                const double right = c + 1 < cols ? field.magnitude(r, c + 1) : 0.0;
                crest = m >= left && m >= right;
            } else {
                const double up = r > 0 ? field.magnitude(r - 1, c) : 0.0;
                const double down = r + 1 < rows ? field.magnitude(r + 1, c) : 0.0;
                crest = m >= up && m >= down;
            }
            if (crest)
                anchors.push_back({c, r});
        }
    }
    std::stable_sort(anchors.begin(), anchors.end(),
                     [&](const PixelPoint& a, const PixelPoint& b) {
                         return field.magnitude(a.row, a.col) > field.magnitude(b.row, b.col);
                     });
    return anchors;
}

// ============================================================================
// Chain walking
// ============================================================================

/// Ordered ridge pixels produced by one anchor walk.
struct EdgeChain {
    std::vector<PixelPoint> points;
};

namespace detail {

struct WalkState {
    PixelPoint pos;
    int orient;  // +-1 along the current walk axis
};

/// One step along the ridge. Candidates are the three forward neighbors of
/// the current walk axis; the strongest unvisited one above the floor wins.
inline bool walk_step(const GradientField& f, Array2D<std::uint8_t>& visited, WalkState& st,
                      double floor_mag) {
    const int rows = f.magnitude.rows();
    const int cols = f.magnitude.cols();
    const std::uint8_t axis = f.direction(st.pos.row, st.pos.col);

    PixelPoint best {};
    double best_mag = -1.0;
    auto consider = [&](int rr, int cc) {
        if (rr < 0 || rr >= rows || cc < 0 || cc >= cols)
            return;
        if (visited(rr, cc))
            return;
        const double m = f.magnitude(rr, cc);
        if (m < floor_mag || m <= best_mag)
            return;
        best_mag = m;
        best = {cc, rr};
    };

    if (axis == GradientField::kWalkRows) {
        const int rr = st.pos.row + st.orient;
        consider(rr, st.pos.col);       // straight first: wins magnitude ties
        consider(rr, st.pos.col - 1);
        consider(rr, st.pos.col + 1);
    } else {
        const int cc = st.pos.col + st.orient;
        consider(st.pos.row, cc);
        consider(st.pos.row - 1, cc);
        consider(st.pos.row + 1, cc);
    }
    if (best_mag < 0.0)
        return false;

    // Keep the orientation consistent across axis switches: derive the next
    // orientation from the actual movement along the new pixel's axis.
    const std::uint8_t next_axis = f.direction(best.row, best.col);
    int next_orient = st.orient;
    if (next_axis == GradientField::kWalkRows) {
        const int dr = best.row - st.pos.row;
        next_orient = dr != 0 ? (dr > 0 ? 1 : -1) : st.orient;
    } else {
        const int dc = best.col - st.pos.col;
        next_orient = dc != 0 ? (dc > 0 ? 1 : -1) : st.orient;
    }
    st.pos = best;
    st.orient = next_orient;
    visited(best.row, best.col) = 1;
    return true;
}

}  // namespace detail

/// Walks ridge chains from the anchors. Each pixel joins at most one chain
/// (first anchor that reaches it, anchors visited strongest first).
inline std::vector<EdgeChain> draw_edges(const GradientField& field,
                                         const std::vector<PixelPoint>& anchors,
                                         double magnitude_floor = 0.1) {
    Array2D<std::uint8_t> visited(field.magnitude.rows(), field.magnitude.cols(), 0);
    std::vector<EdgeChain> chains;
    for (const auto& a : anchors) {
        if (visited(a.row, a.col))
            continue;
        visited(a.row, a.col) = 1;

        std::vector<PixelPoint> backward, forward;
        for (int orient : {-1, +1}) {
            detail::WalkState st {a, orient};
            auto& side = orient < 0 ? backward : forward;
            while (detail::walk_step(field, visited, st, magnitude_floor))
                side.push_back(st.pos);
        }
        EdgeChain chain;
        chain.points.reserve(backward.size() + forward.size() + 1);
        for (auto it = backward.rbegin(); it != backward.rend(); ++it)
            chain.points.push_back(*it);
        chain.points.push_back(a);
        chain.points.insert(chain.points.end(), forward.begin(), forward.end());
        chains.push_back(std::move(chain));
    }
    return chains;
}

// ============================================================================
// Incremental segment growth
// ============================================================================

namespace detail {

/// Running TLS moments; rms() is the perpendicular RMS of the best-fit line.
struct Moments {
    double n {0}, sx {0}, sy {0}, sxx {0}, syy {0}, sxy {0};

    void add(const PixelPoint& p) {
        const double x = p.col, y = p.row;
        n += 1;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    [[nodiscard]] double rms() const {
        if (n < 2)
            return 0.0;
        const double cxx = sxx - sx * sx / n;
        const double cyy = syy - sy * sy / n;
        const double cxy = sxy - sx * sy / n;
        const double h = 0.5 * (cxx + cyy);
        const double d = std::sqrt(0.25 * (cxx - cyy) * (cxx - cyy) + cxy * cxy);
        return std::sqrt(std::max(0.0, (h - d) / n));
    }
};

}  // namespace detail

/// Cuts each chain into maximal straight runs: a segment starts with
/// min_seg_len pixels fitting within fit_error_max RMS and grows until a
/// pixel would break that bound. Runs shorter than min_seg_len are dropped.
inline std::vector<Segment> fit_chains(const std::vector<EdgeChain>& chains,
                                       const EdlinesParams& p = {}) {
    std::vector<Segment> out;
    for (const auto& chain : chains) {
        const auto& pts = chain.points;
        const std::size_t n = pts.size();
        std::size_t i = 0;
        while (i + static_cast<std::size_t>(p.min_seg_len) <= n) {
            detail::Moments m;
            for (std::size_t k = 0; k < static_cast<std::size_t>(p.min_seg_len); ++k)
                m.add(pts[i + k]);
            if (m.rms() > p.fit_error_max) {
                ++i;
                continue;
            }
            std::size_t j = i + static_cast<std::size_t>(p.min_seg_len);
            while (j < n) {
                detail::Moments trial = m;
                trial.add(pts[j]);
                if (trial.rms() > p.fit_error_max)
                    break;
                m = trial;
                ++j;
            }
            out.push_back(fit_segment(
                std::vector<PixelPoint>(pts.begin() + static_cast<long>(i),
                                        pts.begin() + static_cast<long>(j)),
                p.recon.width_prior));
            i = j;
        }
    }
    return out;
}

/// Anchor walk plus incremental fitting in one call.
inline std::vector<Segment> draw_and_fit(const GradientField& field,
                                         const std::vector<PixelPoint>& anchors,
                                         const EdlinesParams& p = {}) {
    return fit_chains(draw_edges(field, anchors, p.magnitude_floor), p);
}

// ============================================================================
// Doublon removal
// ============================================================================

/// Removes near-duplicate parallel segments (walks on both flanks of one
/// wide ridge): a segment is dropped when a longer kept segment runs within
/// doublon_angle, closer than the width prior, with more than
/// doublon_overlap of the shorter one overlapping in projection. Greedy
/// from the longest segment; deterministic and idempotent.
inline std::vector<Segment> remove_doublons(std::vector<Segment> segments,
                                            const EdlinesParams& p = {}) {
    std::sort(segments.begin(), segments.end(), [](const Segment& a, const Segment& b) {
        if (a.length != b.length)
            return a.length > b.length;
        return detail::segment_order(a, b);
    });
    std::vector<Segment> kept;
    for (const auto& s : segments) {
        bool dominated = false;
        for (const auto& k : kept) {
            if (detail::axis_angle_diff(k.angle, s.angle) >= p.doublon_angle)
                continue;
            if (std::abs(k.offset_of(s.midpoint())) >= p.recon.width_prior)
                continue;
            const double t0 = (s.p0 - k.p0).dot(k.dir);
            const double t1 = (s.p1 - k.p0).dot(k.dir);
            const double lo = std::min(t0, t1);
            const double hi = std::max(t0, t1);
            const double overlap = std::min(hi, k.length) - std::max(lo, 0.0);
            if (overlap > p.doublon_overlap * s.length) {
                dominated = true;
                break;
            }
        }
        if (!dominated)
            kept.push_back(s);
    }
    return kept;
}

// ============================================================================
// Detector
// ============================================================================

/// Full pipeline: smooth -> field -> anchors -> walk & fit -> doublons ->
/// collinear chains (same reconstruction stage as the cluster detector).
inline std::vector<TransitionLine> detect_lines_edlines(const TransitionMap& map,
                                                        const EdlinesParams& p = {}) {
    const auto smoothed = smooth_map(map, p.sigma);
    const auto field = gradient_field(smoothed);
    const auto anchors = extract_anchors(field, p.anchor_threshold);
    auto segments = draw_and_fit(field, anchors, p);
    segments = remove_doublons(std::move(segments), p);
    return collinear_merge(std::move(segments), p.recon);
}

}  // namespace dottuner
