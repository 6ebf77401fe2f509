#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "dottuner/core.hpp"
#include "dottuner/edlines.hpp"
#include "dottuner/geometry.hpp"
#include "dottuner/hough.hpp"
#include "oracles.hpp"

using namespace dottuner;
using Catch::Approx;

namespace {

/// Direct (non-separable) zero-padded Gaussian convolution for comparison.
Array2D<double> brute_force_smooth(const TransitionMap& m, double sigma) {
    const int rows = m.mask.rows();
    const int cols = m.mask.cols();
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k)
        v /= ksum;
    Array2D<double> out(rows, cols, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int dr = -radius; dr <= radius; ++dr)
                for (int dc = -radius; dc <= radius; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= rows || cc < 0 || cc >= cols || !m.mask(rr, cc))
                        continue;
                    acc += k[static_cast<std::size_t>(dr + radius)] *
                           k[static_cast<std::size_t>(dc + radius)];
                }
            out(r, c) = acc;
        }
    return out;
}

/// The doublon gate, re-derived: k suppresses s when near-parallel, closer
/// than the width prior at s's midpoint, and overlapping most of s.
bool dominates(const Segment& k, const Segment& s, const EdlinesParams& p) {
    double da = std::abs(k.angle - s.angle);
    da = std::min(da, kPi - da);
    if (da >= p.doublon_angle)
        return false;
    if (std::abs(k.offset_of(s.midpoint())) >= p.recon.width_prior)
        return false;
    const double t0 = (s.p0 - k.p0).dot(k.dir);
    const double t1 = (s.p1 - k.p0).dot(k.dir);
    const double overlap = std::min(std::max(t0, t1), k.length) - std::max(std::min(t0, t1), 0.0);
    return overlap > p.doublon_overlap * s.length;
}

Segment horizontal_segment(double row, int c0, int c1) {
    std::vector<PixelPoint> pts;
    for (int c = c0; c <= c1; ++c)
        pts.push_back({c, static_cast<int>(std::lround(row))});
    return fit_segment(pts, 3.5);
}

Segment vertical_segment(double col, int r0, int r1) {
    std::vector<PixelPoint> pts;
    for (int r = r0; r <= r1; ++r)
        pts.push_back({static_cast<int>(std::lround(col)), r});
    return fit_segment(pts, 3.5);
}

double line_point_distance(const Vec2& e0, const Vec2& e1, const Vec2& q) {
    const Vec2 d = e1 - e0;
    return std::abs((q - e0).x * d.y - (q - e0).y * d.x) / d.norm();
}

bool same_segment(const Segment& a, const Segment& b) {
    return a.p0 == b.p0 && a.p1 == b.p1 && a.support == b.support;
}

}  // namespace

// ============================================================================
// Smoothing
// ============================================================================

TEST_CASE("separable smoothing matches a direct convolution") {
    auto m = oracles::make_map(24, 30);
    oracles::sprinkle(m, 0.15, 3);
    const auto fast = smooth_map(m, 1.0);
    const auto slow = brute_force_smooth(m, 1.0);
    for (int r = 0; r < 24; ++r)
        for (int c = 0; c < 30; ++c)
            REQUIRE(fast(r, c) == Approx(slow(r, c)).margin(1e-12));
}

TEST_CASE("an interior impulse keeps unit mass and full symmetry") {
    auto m = oracles::make_map(21, 21);
    m.mask(10, 10) = 1;
    const auto s = smooth_map(m, 1.0);

    double mass = 0.0;
    for (int r = 0; r < 21; ++r)
        for (int c = 0; c < 21; ++c)
            mass += s(r, c);
    CHECK(mass == Approx(1.0).margin(1e-12));

    CHECK(s(10, 10) > s(10, 11));
    for (int d = 1; d <= 3; ++d) {
        CHECK(s(10 + d, 10) == Approx(s(10 - d, 10)).margin(1e-14));
        CHECK(s(10, 10 + d) == Approx(s(10, 10 - d)).margin(1e-14));
        CHECK(s(10 + d, 10) == Approx(s(10, 10 + d)).margin(1e-14));
    }
    // Separability: the response factorizes into row and column profiles.
    CHECK(s(12, 13) * s(10, 10) == Approx(s(12, 10) * s(10, 13)).margin(1e-14));
}

TEST_CASE("a wider kernel spreads an impulse further") {
    auto m = oracles::make_map(31, 31);
    m.mask(15, 15) = 1;
    const auto narrow = smooth_map(m, 0.8);
    const auto wide = smooth_map(m, 2.0);
    CHECK(narrow(15, 15) > wide(15, 15));
    CHECK(wide(15, 20) > narrow(15, 20));
}

// ============================================================================
// Gradient field
// ============================================================================

TEST_CASE("ridge magnitude is the smoothed map and axes follow the band") {
    auto m = oracles::make_map(40, 40);
    oracles::draw_line(m, 20.0, 5, 34, 0.0, 1);  // vertical band
    const auto smoothed = smooth_map(m, 1.0);
    const auto f = gradient_field(smoothed);

    for (int r = 0; r < 40; ++r)
        for (int c = 0; c < 40; ++c)
            REQUIRE(f.magnitude(r, c) == smoothed(r, c));
    // Crossing the band changes columns, so the walk axis is along rows.
    for (int r = 10; r <= 30; r += 5)
        CHECK(f.direction(r, 20) == GradientField::kWalkRows);

    auto h = oracles::make_map(40, 40);
    oracles::draw_line_by_col(h, 20.0, 5, 34, 0.0, 1);  // horizontal band
    const auto hf = gradient_field(smooth_map(h, 1.0));
    for (int c = 10; c <= 30; c += 5)
        CHECK(hf.direction(20, c) == GradientField::kWalkCols);
}

// ============================================================================
// Anchors
// ============================================================================

TEST_CASE("anchors sit on the band crest, sorted strongest first") {
    auto m = oracles::make_map(60, 80);
    oracles::draw_line(m, 20.0, 4, 55, 0.5, 1);
    const auto f = gradient_field(smooth_map(m, 1.0));
    const auto anchors = extract_anchors(f, 0.25);
    REQUIRE(anchors.size() >= 30);

    for (std::size_t i = 1; i < anchors.size(); ++i)
        CHECK(f.magnitude(anchors[i - 1].row, anchors[i - 1].col) >=
              f.magnitude(anchors[i].row, anchors[i].col));

    for (const auto& a : anchors) {
        CHECK(f.magnitude(a.row, a.col) >= 0.25);
        const double true_col = 20.0 + 0.5 * (a.row - 4);
        CHECK(std::abs(a.col - true_col) <= 1.5);
    }
}

TEST_CASE("a quiet field yields no anchors") {
    const auto m = oracles::make_map(30, 30);
    const auto f = gradient_field(smooth_map(m, 1.0));
    CHECK(extract_anchors(f, 0.25).empty());
}

// ============================================================================
// Chain walking
// ============================================================================

TEST_CASE("chains never share pixels and stay 8-connected") {
    auto m = oracles::make_map(60, 120);
    oracles::draw_line(m, 25.0, 4, 55, 0.6, 1);
    oracles::draw_line(m, 70.0, 4, 55, 0.6, 1);
    oracles::sprinkle(m, 0.01, 5);

    const auto f = gradient_field(smooth_map(m, 1.0));
    const auto chains = draw_edges(f, extract_anchors(f, 0.25), 0.1);
    REQUIRE_FALSE(chains.empty());

    std::set<std::pair<int, int>> seen;
    for (const auto& chain : chains) {
        REQUIRE_FALSE(chain.points.empty());
        for (const auto& p : chain.points)
            CHECK(seen.insert({p.row, p.col}).second);
        for (std::size_t i = 1; i < chain.points.size(); ++i) {
            const int dr = std::abs(chain.points[i].row - chain.points[i - 1].row);
            const int dc = std::abs(chain.points[i].col - chain.points[i - 1].col);
            CHECK(std::max(dr, dc) == 1);
        }
    }
}

TEST_CASE("a clean band is traced end to end by one chain") {
    auto m = oracles::make_map(60, 80);
    oracles::draw_line(m, 20.0, 4, 55, 0.5, 1);
    const auto f = gradient_field(smooth_map(m, 1.0));
    const auto chains = draw_edges(f, extract_anchors(f, 0.25), 0.1);
    REQUIRE_FALSE(chains.empty());

    const auto longest = std::max_element(chains.begin(), chains.end(),
                                          [](const EdgeChain& a, const EdgeChain& b) {
                                              return a.points.size() < b.points.size();
                                          });
    CHECK(longest->points.size() >= 45);
    int min_row = 1000, max_row = -1;
    for (const auto& p : longest->points) {
        min_row = std::min(min_row, p.row);
        max_row = std::max(max_row, p.row);
    }
    CHECK(min_row <= 8);
    CHECK(max_row >= 51);
}

// ============================================================================
// Incremental fitting
// ============================================================================

TEST_CASE("every fitted segment respects the error budget") {
    EdgeChain wiggle;
    for (int c = 0; c < 120; ++c)
        wiggle.points.push_back(
            {c, 20 + static_cast<int>(std::lround(4.0 * std::sin(2.0 * kPi * c / 60.0)))});

    EdlinesParams p;
    const auto segs = fit_chains({wiggle}, p);
    REQUIRE_FALSE(segs.empty());
    for (const auto& s : segs) {
        CHECK(s.rms_residual <= p.fit_error_max + 1e-9);
        CHECK(s.support >= p.min_seg_len);
    }
}

TEST_CASE("a corner chain breaks into one segment per leg") {
    EdgeChain corner;
    for (int c = 10; c <= 39; ++c)
        corner.points.push_back({c, 10});
    for (int r = 11; r <= 40; ++r)
        corner.points.push_back({39, r});

    EdlinesParams p;
    const auto segs = fit_chains({corner}, p);
    REQUIRE(segs.size() >= 2);
    bool horizontal = false, vertical = false;
    for (const auto& s : segs) {
        CHECK(s.rms_residual <= p.fit_error_max + 1e-9);
        if (s.support < 12)
            continue;
        if (std::min(s.angle, kPi - s.angle) < 0.15)
            horizontal = true;
        if (std::abs(s.angle - kPi / 2.0) < 0.15)
            vertical = true;
    }
    CHECK(horizontal);
    CHECK(vertical);
}

TEST_CASE("chains shorter than the minimum length yield nothing") {
    EdgeChain stub;
    for (int c = 0; c < 7; ++c)
        stub.points.push_back({c, 5});
    CHECK(fit_chains({stub}, EdlinesParams {}).empty());
}

// ============================================================================
// Doublon removal
// ============================================================================

TEST_CASE("a close parallel twin is suppressed, distant and crossing kept") {
    EdlinesParams p;
    const auto main = horizontal_segment(10.0, 0, 49);
    const auto twin = horizontal_segment(12.0, 5, 44);    // 2 px away, shorter
    const auto far = horizontal_segment(30.0, 0, 49);     // 20 px away
    const auto cross = vertical_segment(25.0, 0, 49);     // perpendicular

    const auto kept = remove_doublons({main, twin, far, cross}, p);
    REQUIRE(kept.size() == 3);
    bool has_main = false, has_far = false, has_cross = false, has_twin = false;
    for (const auto& s : kept) {
        has_main = has_main || same_segment(s, main);
        has_far = has_far || same_segment(s, far);
        has_cross = has_cross || same_segment(s, cross);
        has_twin = has_twin || same_segment(s, twin);
    }
    CHECK(has_main);
    CHECK(has_far);
    CHECK(has_cross);
    CHECK_FALSE(has_twin);
}

TEST_CASE("doublon removal is idempotent and order independent") {
    std::vector<Segment> segs = {
        horizontal_segment(10.0, 0, 49),  horizontal_segment(12.0, 5, 44),
        horizontal_segment(11.0, 20, 60), vertical_segment(25.0, 0, 49),
        horizontal_segment(40.0, 0, 30),  horizontal_segment(42.5, 2, 28),
    };
    EdlinesParams p;
    const auto once = remove_doublons(segs, p);
    const auto twice = remove_doublons(once, p);
    REQUIRE(once.size() == twice.size());
    for (std::size_t i = 0; i < once.size(); ++i)
        CHECK(same_segment(once[i], twice[i]));

    auto shuffled = segs;
    std::mt19937 rng(17);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto again = remove_doublons(shuffled, p);
    REQUIRE(again.size() == once.size());
    for (std::size_t i = 0; i < once.size(); ++i)
        CHECK(same_segment(again[i], once[i]));
}

TEST_CASE("doublon survivors form a fixpoint of the domination gate") {
    std::mt19937 rng(23);
    std::uniform_real_distribution<double> row_d(5.0, 55.0);
    std::uniform_int_distribution<int> c0_d(0, 30);
    std::uniform_int_distribution<int> len_d(15, 60);

    std::vector<Segment> segs;
    for (int i = 0; i < 14; ++i) {
        const int c0 = c0_d(rng);
        segs.push_back(horizontal_segment(row_d(rng), c0, c0 + len_d(rng)));
    }
    EdlinesParams p;
    const auto kept = remove_doublons(segs, p);
    REQUIRE_FALSE(kept.empty());

    // No kept segment is dominated by a kept segment of equal or longer length.
    for (const auto& s : kept)
        for (const auto& k : kept) {
            if (same_segment(s, k) || k.length < s.length)
                continue;
            CHECK_FALSE(dominates(k, s, p));
        }
    // Every dropped segment is dominated by at least one survivor.
    for (const auto& s : segs) {
        const bool alive = std::any_of(kept.begin(), kept.end(),
                                       [&](const Segment& k) { return same_segment(k, s); });
        if (alive)
            continue;
        CHECK(std::any_of(kept.begin(), kept.end(),
                          [&](const Segment& k) { return dominates(k, s, p); }));
    }
}

// ============================================================================
// End-to-end detection
// ============================================================================

TEST_CASE("edlines recovers two parallel bands accurately") {
    auto m = oracles::make_map(60, 160);
    oracles::draw_line(m, 20.0, 2, 57, 0.8, 1);
    oracles::draw_line(m, 80.0, 2, 57, 0.8, 1);

    const auto lines = detect_lines_edlines(m, EdlinesParams {});
    REQUIRE(lines.size() == 2);

    const double want_angle = std::atan2(1.0, 0.8);
    std::vector<double> c0s = {20.0, 80.0};
    std::vector<bool> matched(2, false);
    for (const auto& line : lines) {
        CHECK(std::abs(line.axis_angle - want_angle) < 0.05);
        CHECK(line.support >= 35);
        for (std::size_t i = 0; i < c0s.size(); ++i) {
            double err = 0.0;
            int count = 0;
            for (int r = 6; r <= 54; r += 8) {
                const Vec2 truth {c0s[i] + 0.8 * (r - 2), static_cast<double>(r)};
                err += line_point_distance(line.e0, line.e1, truth);
                ++count;
            }
            if (err / count < 1.5)
                matched[i] = true;
        }
    }
    CHECK(matched[0]);
    CHECK(matched[1]);
}

TEST_CASE("edlines ignores speckle-only maps") {
    for (unsigned seed = 1; seed <= 10; ++seed) {
        auto m = oracles::make_map(60, 200);
        oracles::sprinkle(m, 0.01, seed);
        CHECK(detect_lines_edlines(m, EdlinesParams {}).empty());
    }
}

TEST_CASE("edlines tolerates speckle on top of a band") {
    for (unsigned seed : {21u, 22u, 23u}) {
        auto m = oracles::make_map(60, 160);
        oracles::draw_line(m, 30.0, 2, 57, 0.7, 1);
        oracles::sprinkle(m, 0.004, seed);

        const auto lines = detect_lines_edlines(m, EdlinesParams {});
        REQUIRE_FALSE(lines.empty());
        const auto best = std::max_element(lines.begin(), lines.end(),
                                           [](const TransitionLine& a, const TransitionLine& b) {
                                               return a.support < b.support;
                                           });
        double err = 0.0;
        int count = 0;
        for (int r = 6; r <= 54; r += 8) {
            const Vec2 truth {30.0 + 0.7 * (r - 2), static_cast<double>(r)};
            err += line_point_distance(best->e0, best->e1, truth);
            ++count;
        }
        CHECK(err / count < 1.5);
    }
}

TEST_CASE("edlines detection is deterministic") {
    auto m = oracles::make_map(60, 160);
    oracles::draw_line(m, 25.0, 3, 56, 0.9, 1);
    oracles::sprinkle(m, 0.005, 77);

    const auto a = detect_lines_edlines(m, EdlinesParams {});
    const auto b = detect_lines_edlines(m, EdlinesParams {});
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].e0 == b[i].e0);
        CHECK(a[i].e1 == b[i].e1);
        CHECK(a[i].support == b[i].support);
    }
}

TEST_CASE("degenerate map shapes do not break the detector") {
    auto thin = oracles::make_map(1, 30);
    for (int c = 5; c < 25; ++c)
        thin.mask(0, c) = 1;
    CHECK_NOTHROW(detect_lines_edlines(thin, EdlinesParams {}));

    auto tall = oracles::make_map(30, 1);
    for (int r = 5; r < 25; ++r)
        tall.mask(r, 0) = 1;
    CHECK_NOTHROW(detect_lines_edlines(tall, EdlinesParams {}));

    const auto empty = oracles::make_map(20, 20);
    CHECK(detect_lines_edlines(empty, EdlinesParams {}).empty());
}

// ============================================================================
// Detector agreement
// ============================================================================

TEST_CASE("both detectors agree on the same bands") {
    auto m = oracles::make_map(60, 180);
    oracles::draw_line(m, 25.0, 2, 57, 1.0, 2);
    oracles::draw_line(m, 95.0, 2, 57, 1.0, 2);
    oracles::sprinkle(m, 0.002, 31);

    const auto hough = detect_lines_hough(m, HoughParams {});
    const auto edl = detect_lines_edlines(m, EdlinesParams {});
    REQUIRE(hough.size() == 2);
    REQUIRE(edl.size() == 2);

    for (const auto& hl : hough) {
        double best = 1e9;
        double best_angle = 1e9;
        for (const auto& el : edl) {
            const double d = line_point_distance(el.e0, el.e1, hl.midpoint());
            if (d < best) {
                best = d;
                double da = std::abs(hl.axis_angle - el.axis_angle);
                best_angle = std::min(da, kPi - da);
            }
        }
        CHECK(best < 2.0);
        CHECK(best_angle < 0.05);
    }
}
