#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "dottuner/core.hpp"
#include "dottuner/geometry.hpp"
#include "dottuner/hough.hpp"
#include "oracles.hpp"

using namespace dottuner;
using Catch::Approx;

namespace {

/// Active pixels of a map in row-major scan order.
std::vector<PixelPoint> active_points(const TransitionMap& m) {
    std::vector<PixelPoint> pts;
    for (int r = 0; r < m.mask.rows(); ++r)
        for (int c = 0; c < m.mask.cols(); ++c)
            if (m.mask(r, c))
                pts.push_back({c, r});
    return pts;
}

/// Clusters converted to index sets over the scan-order pixel list.
std::vector<std::set<int>> as_index_sets(const std::vector<PixelCluster>& clusters,
                                         const std::vector<PixelPoint>& scan) {
    std::map<std::pair<int, int>, int> index;
    for (int i = 0; i < static_cast<int>(scan.size()); ++i)
        index[{scan[i].row, scan[i].col}] = i;
    std::vector<std::set<int>> out;
    for (const auto& cl : clusters) {
        std::set<int> s;
        for (const auto& p : cl.points)
            s.insert(index.at({p.row, p.col}));
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<std::set<int>> sorted_groups(std::vector<std::set<int>> groups) {
    std::sort(groups.begin(), groups.end());
    return groups;
}

/// Perpendicular distance of a point from the infinite line through e0 -> e1.
double line_point_distance(const Vec2& e0, const Vec2& e1, const Vec2& q) {
    const Vec2 d = e1 - e0;
    const double n = d.norm();
    return std::abs((q - e0).x * d.y - (q - e0).y * d.x) / n;
}

/// Walks the split tree checking structural invariants; returns leaf count.
int check_tree(const SplitNode& node, const HoughParams& p) {
    if (node.leaf()) {
        // Leaves either carry an accepted fit or were discarded as undersized.
        if (node.segment.has_value()) {
            CHECK(node.accepted);
            CHECK(node.segment->support == static_cast<int>(node.points.size()));
        } else {
            CHECK_FALSE(node.accepted);
            CHECK(static_cast<int>(node.points.size()) < p.min_cluster);
        }
        if (node.accepted && node.segment) {
            const bool within = node.segment->rms_residual <=
                                p.residual_factor * p.recon.width_prior + 1e-12;
            if (!within) {
                // Only a projection collapse may accept an over-budget fit:
                // all points then project to one side of (or onto) the median.
                std::vector<double> t;
                for (const auto& q : node.points)
                    t.push_back((Vec2 {static_cast<double>(q.col), static_cast<double>(q.row)} -
                                 node.segment->p0)
                                    .dot(node.segment->dir));
                std::vector<double> s(t);
                std::nth_element(s.begin(), s.begin() + static_cast<long>(s.size() / 2), s.end());
                const double median = s[s.size() / 2];
                const bool lo_empty = std::none_of(t.begin(), t.end(),
                                                   [&](double x) { return x < median; });
                const bool hi_empty = std::all_of(t.begin(), t.end(),
                                                  [&](double x) { return x < median; });
                CHECK((lo_empty || hi_empty));
            }
        }
        return 1;
    }
    REQUIRE(node.lo);
    REQUIRE(node.hi);
    // Children partition the parent's points exactly.
    auto key = [](const PixelPoint& q) { return std::pair<int, int> {q.row, q.col}; };
    std::vector<std::pair<int, int>> parent, kids;
    for (const auto& q : node.points)
        parent.push_back(key(q));
    for (const auto& q : node.lo->points)
        kids.push_back(key(q));
    for (const auto& q : node.hi->points)
        kids.push_back(key(q));
    std::sort(parent.begin(), parent.end());
    std::sort(kids.begin(), kids.end());
    CHECK(parent == kids);
    CHECK_FALSE(node.lo->points.empty());
    CHECK_FALSE(node.hi->points.empty());
    return check_tree(*node.lo, p) + check_tree(*node.hi, p);
}

}  // namespace

// ============================================================================
// Clustering
// ============================================================================

TEST_CASE("clustering matches a brute-force single-linkage oracle") {
    for (unsigned seed : {1u, 2u, 3u, 4u, 5u}) {
        for (double density : {0.03, 0.06, 0.10}) {
            auto m = oracles::make_map(30, 40);
            oracles::sprinkle(m, density, seed + static_cast<unsigned>(1000 * density));
            const auto scan = active_points(m);
            const auto clusters = cluster_points(m, 1);
            const auto got = sorted_groups(as_index_sets(clusters, scan));
            const auto want = sorted_groups(oracles::brute_force_clusters(scan));
            REQUIRE(got == want);
        }
    }
}

TEST_CASE("cluster points and cluster order follow the row-major scan") {
    auto m = oracles::make_map(40, 60);
    oracles::sprinkle(m, 0.08, 42);
    const auto clusters = cluster_points(m, 1);
    REQUIRE_FALSE(clusters.empty());

    auto scan_key = [&](const PixelPoint& p) { return p.row * m.mask.cols() + p.col; };
    int prev_first = -1;
    for (const auto& cl : clusters) {
        REQUIRE_FALSE(cl.points.empty());
        for (std::size_t i = 1; i < cl.points.size(); ++i)
            CHECK(scan_key(cl.points[i - 1]) < scan_key(cl.points[i]));
        CHECK(prev_first < scan_key(cl.points.front()));
        prev_first = scan_key(cl.points.front());
    }
}

TEST_CASE("cluster bounding boxes are tight") {
    auto m = oracles::make_map(40, 60);
    oracles::sprinkle(m, 0.07, 7);
    for (const auto& cl : cluster_points(m, 1)) {
        int min_c = cl.points.front().col, max_c = min_c;
        int min_r = cl.points.front().row, max_r = min_r;
        for (const auto& p : cl.points) {
            min_c = std::min(min_c, p.col);
            max_c = std::max(max_c, p.col);
            min_r = std::min(min_r, p.row);
            max_r = std::max(max_r, p.row);
        }
        CHECK(cl.min_col == min_c);
        CHECK(cl.max_col == max_c);
        CHECK(cl.min_row == min_r);
        CHECK(cl.max_row == max_r);
    }
}

TEST_CASE("undersized clusters are dropped, larger ones kept unchanged") {
    auto m = oracles::make_map(20, 40);
    // One 10-pixel blob, one 3-pixel blob, one isolated pixel.
    for (int c = 5; c < 15; ++c)
        m.mask(4, c) = 1;
    m.mask(12, 8) = m.mask(12, 9) = m.mask(13, 8) = 1;
    m.mask(17, 30) = 1;

    const auto all = cluster_points(m, 1);
    REQUIRE(all.size() == 3);
    const auto kept = cluster_points(m, 5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].points.size() == 10);
    CHECK(kept[0].points == all[0].points);

    const auto none = cluster_points(m, 11);
    CHECK(none.empty());
}

TEST_CASE("diagonal neighbours join one cluster, a two-pixel gap separates") {
    auto m = oracles::make_map(10, 10);
    m.mask(2, 2) = 1;
    m.mask(3, 3) = 1;  // diagonal: same cluster
    m.mask(3, 5) = 1;  // one empty column away: different cluster
    const auto clusters = cluster_points(m, 1);
    REQUIRE(clusters.size() == 2);
    CHECK(clusters[0].points.size() == 2);
    CHECK(clusters[1].points.size() == 1);
}

TEST_CASE("clustering an empty map yields nothing") {
    const auto m = oracles::make_map(16, 16);
    CHECK(cluster_points(m, 1).empty());
}

// ============================================================================
// Divide and conquer splitting
// ============================================================================

TEST_CASE("a straight band is accepted whole as a single segment") {
    auto m = oracles::make_map(60, 120);
    oracles::draw_line(m, 20.0, 5, 54, 1.5, 1);  // 3 px wide, 50 rows
    const auto clusters = cluster_points(m, 5);
    REQUIRE(clusters.size() == 1);

    HoughParams p;
    const auto root = split_cluster(clusters[0], p);
    REQUIRE(root->leaf());
    REQUIRE(root->accepted);
    const auto segs = accepted_segments(*root);
    REQUIRE(segs.size() == 1);

    const Segment& s = segs[0];
    CHECK(s.support == static_cast<int>(clusters[0].points.size()));
    // Expected axis: one row down, 1.5 columns right.
    const double want_angle = std::atan2(1.0, 1.5);
    CHECK(std::abs(s.angle - want_angle) < 0.02);
    // A 3 px cross-section band keeps the residual near sqrt(2/3).
    CHECK(s.rms_residual < 1.2);
    // Both endpoints sit on the drawn centerline.
    for (const Vec2& e : {s.p0, s.p1}) {
        const double true_col = 20.0 + 1.5 * (e.y - 5.0);
        CHECK(std::abs(e.x - true_col) < 1.5);
    }
    const double want_len = std::hypot(49.0 * 1.5, 49.0);
    CHECK(std::abs(s.length - want_len) < 4.0);
}

TEST_CASE("an L shape splits into both orientations") {
    auto m = oracles::make_map(70, 100);
    oracles::draw_line(m, 30.0, 5, 55, 0.0, 1);          // vertical arm
    oracles::draw_line_by_col(m, 55.0, 30, 80, 0.0, 1);  // horizontal arm
    const auto clusters = cluster_points(m, 5);
    REQUIRE(clusters.size() == 1);

    HoughParams p;
    const auto root = split_cluster(clusters[0], p);
    CHECK_FALSE(root->leaf());
    check_tree(*root, p);

    const auto segs = accepted_segments(*root);
    REQUIRE(segs.size() >= 2);
    bool vertical = false, horizontal = false;
    for (const auto& s : segs) {
        if (s.support < 30)
            continue;
        if (std::abs(s.angle - kPi / 2.0) < 0.1)
            vertical = true;
        if (std::min(s.angle, kPi - s.angle) < 0.1)
            horizontal = true;
    }
    CHECK(vertical);
    CHECK(horizontal);
}

TEST_CASE("split trees partition points and respect the residual budget") {
    // A quarter arc far from straight: forces several recursion levels.
    auto m = oracles::make_map(90, 110);
    for (int k = 0; k <= 300; ++k) {
        const double th = 0.5 * kPi * k / 300.0;
        const int c = static_cast<int>(std::lround(15.0 + 70.0 * std::cos(th)));
        const int r = static_cast<int>(std::lround(10.0 + 70.0 * std::sin(th)));
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc)
                if (m.mask.in_bounds(r + dr, c + dc))
                    m.mask(r + dr, c + dc) = 1;
    }
    const auto clusters = cluster_points(m, 5);
    REQUIRE(clusters.size() == 1);

    HoughParams p;
    const auto root = split_cluster(clusters[0], p);
    CHECK_FALSE(root->leaf());
    check_tree(*root, p);

    const auto segs = accepted_segments(*root);
    REQUIRE(segs.size() >= 2);
    int accepted_support = 0;
    for (const auto& s : segs) {
        accepted_support += s.support;
        CHECK(s.rms_residual <= p.residual_factor * p.recon.width_prior + 1e-9);
        if (s.support < 12)
            continue;
        // Chord direction is near the circle tangent at its midpoint.
        const Vec2 mid = s.midpoint();
        Vec2 radial {mid.x - 15.0, mid.y - 10.0};
        const double n = radial.norm();
        radial.x /= n;
        radial.y /= n;
        CHECK(std::abs(s.dir.dot(radial)) < 0.35);
    }
    // Splitting may discard small mixed leaves but keeps the bulk.
    CHECK(accepted_support >= static_cast<int>(0.6 * clusters[0].points.size()));
}

TEST_CASE("splitting rejects clusters below the minimum size") {
    PixelCluster tiny;
    tiny.points = {{0, 0}, {1, 0}, {2, 0}};
    HoughParams p;
    CHECK_THROWS_AS(split_cluster(tiny, p), GeometryError);
}

TEST_CASE("a lenient residual budget absorbs the L without splitting") {
    auto m = oracles::make_map(50, 50);
    oracles::draw_line(m, 20.0, 5, 40, 0.0, 1);
    oracles::draw_line_by_col(m, 40.0, 20, 45, 0.0, 1);
    const auto clusters = cluster_points(m, 5);
    REQUIRE(clusters.size() == 1);

    HoughParams p;
    p.residual_factor = 10.0;  // budget far above any plausible residual
    const auto root = split_cluster(clusters[0], p);
    CHECK(root->leaf());
    CHECK(root->accepted);
    CHECK(accepted_segments(*root).size() == 1);
}

// ============================================================================
// End-to-end detection
// ============================================================================

TEST_CASE("two parallel bands become two accurate lines") {
    auto m = oracles::make_map(60, 200);
    oracles::draw_line(m, 20.0, 2, 57, 1.5, 2);
    oracles::draw_line(m, 90.0, 2, 57, 1.5, 2);

    HoughParams p;
    const auto lines = detect_lines_hough(m, p);
    REQUIRE(lines.size() == 2);

    const double want_angle = std::atan2(1.0, 1.5);
    std::vector<double> c0s = {20.0, 90.0};
    std::vector<bool> matched(2, false);
    for (const auto& line : lines) {
        CHECK(std::abs(line.axis_angle - want_angle) < 0.03);
        CHECK(line.support >= 150);
        // d(row)/d(col) of a 1.5 col-per-row band.
        CHECK(line.mean_slope == Approx(1.0 / 1.5).margin(0.05));
        for (std::size_t i = 0; i < c0s.size(); ++i) {
            double err = 0.0;
            int count = 0;
            for (int r = 5; r <= 55; r += 10) {
                const Vec2 truth {c0s[i] + 1.5 * (r - 2), static_cast<double>(r)};
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

TEST_CASE("detection tolerates sparse speckle noise") {
    for (unsigned seed : {11u, 12u, 13u}) {
        auto m = oracles::make_map(60, 160);
        oracles::draw_line(m, 30.0, 2, 57, 1.2, 2);
        oracles::sprinkle(m, 0.004, seed);

        HoughParams p;
        const auto lines = detect_lines_hough(m, p);
        REQUIRE(lines.size() >= 1);

        // The strongest line stays on the drawn band.
        const auto best = std::max_element(lines.begin(), lines.end(),
                                           [](const TransitionLine& a, const TransitionLine& b) {
                                               return a.support < b.support;
                                           });
        double err = 0.0;
        int count = 0;
        for (int r = 5; r <= 55; r += 5) {
            const Vec2 truth {30.0 + 1.2 * (r - 2), static_cast<double>(r)};
            err += line_point_distance(best->e0, best->e1, truth);
            ++count;
        }
        CHECK(err / count < 1.5);
        // Speckle alone never fabricates a second strong line.
        for (const auto& line : lines)
            if (&line != &*best)
                CHECK(line.support < 40);
    }
}

TEST_CASE("speckle-only maps produce no lines") {
    for (unsigned seed = 1; seed <= 10; ++seed) {
        auto m = oracles::make_map(60, 200);
        oracles::sprinkle(m, 0.01, seed);
        const auto lines = detect_lines_hough(m, HoughParams {});
        CHECK(lines.empty());
    }
}

TEST_CASE("an empty map produces no lines") {
    const auto m = oracles::make_map(40, 40);
    CHECK(detect_lines_hough(m, HoughParams {}).empty());
}

TEST_CASE("detection is deterministic") {
    auto m = oracles::make_map(60, 160);
    oracles::draw_line(m, 25.0, 3, 56, 1.4, 2);
    oracles::sprinkle(m, 0.005, 99);

    HoughParams p;
    const auto a = detect_lines_hough(m, p);
    const auto b = detect_lines_hough(m, p);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].e0 == b[i].e0);
        CHECK(a[i].e1 == b[i].e1);
        CHECK(a[i].support == b[i].support);
        CHECK(a[i].segments.size() == b[i].segments.size());
    }
}

TEST_CASE("random bands are recovered across seeds") {
    std::mt19937 rng(2024);
    std::uniform_real_distribution<double> slope_d(0.8, 2.2);
    std::uniform_real_distribution<double> c0_d(15.0, 60.0);
    int recovered = 0;
    const int trials = 8;
    for (int t = 0; t < trials; ++t) {
        const double slope = slope_d(rng);
        const double c0 = c0_d(rng);
        auto m = oracles::make_map(60, 220);
        oracles::draw_line(m, c0, 2, 57, slope, 2);
        oracles::sprinkle(m, 0.003, static_cast<unsigned>(100 + t));

        const auto lines = detect_lines_hough(m, HoughParams {});
        if (lines.empty())
            continue;
        const auto best = std::max_element(lines.begin(), lines.end(),
                                           [](const TransitionLine& a, const TransitionLine& b) {
                                               return a.support < b.support;
                                           });
        double err = 0.0;
        int count = 0;
        for (int r = 5; r <= 55; r += 5) {
            const Vec2 truth {c0 + slope * (r - 2), static_cast<double>(r)};
            err += line_point_distance(best->e0, best->e1, truth);
            ++count;
        }
        if (err / count < 1.5)
            ++recovered;
    }
    CHECK(recovered == trials);
}
