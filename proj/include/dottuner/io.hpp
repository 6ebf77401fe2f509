#pragma once

// File formats and run reports:
//   - stability diagrams as CSV grids with a two-line header
//   - transition maps and line overlays as plain P2 PGM images
//   - device configuration as a commented "key = value" dialect
//   - JSON run reports plus a small schema validator for them

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dottuner/core.hpp"
#include "dottuner/device.hpp"
#include "dottuner/geometry.hpp"
#include "dottuner/signal.hpp"
#include "dottuner/tuner.hpp"

namespace dottuner {

using Json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

// ============================================================================
// Low-level file helpers
// ============================================================================

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f)
        throw IoError("cannot open '" + path + "'");
    return f;
}

inline void check_write(std::FILE* f, const std::string& path) {
    if (std::ferror(f))
        throw IoError("write failed for '" + path + "'");
}

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b])))
        ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])))
        --e;
    return s.substr(b, e - b);
}

inline std::vector<std::string> split_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i])))
            ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j])))
            ++j;
        if (j > i)
            out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

/// Whole-token finite double; `where` prefixes the error message.
inline double parse_double(const std::string& tok, const std::string& where) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || tok.empty())
        throw IoError(where + ": expected a number, got '" + tok + "'");
    if (!std::isfinite(v))
        throw IoError(where + ": non-finite value '" + tok + "'");
    return v;
}

inline long long parse_integer(const std::string& tok, const std::string& where) {
    const double v = parse_double(tok, where);
    const double r = std::round(v);
    if (std::abs(v - r) > 1e-9 * std::max(1.0, std::abs(r)))
        throw IoError(where + ": expected an integer, got '" + tok + "'");
    return static_cast<long long>(r);
}

/// Parses one comma-separated row of finite doubles into `out`.
inline void parse_csv_row(const char* s, const std::string& where, std::vector<double>& out) {
    out.clear();
    const char* p = s;
    while (true) {
        char* end = nullptr;
        errno = 0;
        const double v = std::strtod(p, &end);
        if (end == p)
            throw IoError(where + ": expected a number at '" + std::string(p).substr(0, 12) + "'");
        if (!std::isfinite(v))
            throw IoError(where + ": non-finite value");
        out.push_back(v);
        p = end;
        while (*p == ' ' || *p == '\t')
            ++p;
        if (*p == ',') {
            ++p;
            continue;
        }
        if (*p == '\0' || *p == '\r')
            break;
        throw IoError(where + ": unexpected character '" + std::string(1, *p) + "'");
    }
}

}  // namespace detail

// ============================================================================
// Diagram CSV
// ============================================================================

/// CSV grid layout:
///   line 1: vg1_start,vg1_step,n_cols
///   line 2: vg2_start,vg2_step,n_rows
///   then n_rows lines of n_cols comma-separated current values.
/// Values are written with enough digits to round-trip doubles exactly.
inline void save_diagram(const StabilityDiagram& d, const std::string& path) {
    d.validate();
    auto f = detail::open_file(path, "w");
    std::fprintf(f.get(), "%.17g,%.17g,%d\n", d.window.vg1_start, d.window.vg1_step,
                 d.data.cols());
    std::fprintf(f.get(), "%.17g,%.17g,%d\n", d.window.vg2_start, d.window.vg2_step,
                 d.data.rows());
    for (int r = 0; r < d.data.rows(); ++r) {
        for (int c = 0; c < d.data.cols(); ++c)
            std::fprintf(f.get(), c == 0 ? "%.17g" : ",%.17g", d.data(r, c));
        std::fputc('\n', f.get());
    }
    detail::check_write(f.get(), path);
}

inline StabilityDiagram load_diagram(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open '" + path + "'");
    std::string line;
    std::vector<double> vals;
    auto where = [&](int n) { return path + " line " + std::to_string(n); };
    auto next_line = [&](int n) {
        if (!std::getline(in, line))
            throw IoError(where(n) + ": unexpected end of file");
    };

    auto read_header = [&](int n, const char* what) {
        next_line(n);
        detail::parse_csv_row(line.c_str(), where(n), vals);
        if (vals.size() != 3)
            throw IoError(where(n) + ": header must be " + what);
        if (!(vals[1] > 0.0))
            throw IoError(where(n) + ": step must be > 0");
        const long long count = nearest_index(vals[2], 1e-9);
        if (count < 1)
            throw IoError(where(n) + ": pixel count must be a positive integer");
        return std::pair<double, long long> {vals[0], count};  // step stays in vals[1]
    };

    const auto [v1_start, n_cols0] = read_header(1, "vg1_start,vg1_step,n_cols");
    const double v1_step = vals[1];
    const auto [v2_start, n_rows0] = read_header(2, "vg2_start,vg2_step,n_rows");
    const double v2_step = vals[1];
    const int n_cols = static_cast<int>(n_cols0);
    const int n_rows = static_cast<int>(n_rows0);

    StabilityDiagram d;
    d.window = {v1_start, v1_start + (n_cols - 1) * v1_step, v1_step,
                v2_start, v2_start + (n_rows - 1) * v2_step, v2_step};
    d.data = Array2D<double>(n_rows, n_cols);
    for (int r = 0; r < n_rows; ++r) {
        next_line(3 + r);
        detail::parse_csv_row(line.c_str(), where(3 + r), vals);
        if (static_cast<int>(vals.size()) != n_cols)
            throw IoError(where(3 + r) + ": expected " + std::to_string(n_cols) +
                          " values, got " + std::to_string(vals.size()));
        for (int c = 0; c < n_cols; ++c)
            d.data(r, c) = vals[static_cast<std::size_t>(c)];
    }
    for (int n = 3 + n_rows; std::getline(in, line); ++n)
        if (!detail::trim(line).empty())
            throw IoError(where(n) + ": unexpected extra data");
    d.validate();
    return d;
}

// ============================================================================
// PGM masks and overlays
// ============================================================================

namespace detail {

inline void write_pgm(const Array2D<int>& img, const std::string& path) {
    auto f = open_file(path, "w");
    std::fprintf(f.get(), "P2\n%d %d\n255\n", img.cols(), img.rows());
    for (int r = 0; r < img.rows(); ++r) {
        for (int c = 0; c < img.cols(); ++c)
            std::fprintf(f.get(), c == 0 ? "%d" : " %d", img(r, c));
        std::fputc('\n', f.get());
    }
    check_write(f.get(), path);
}

/// Bresenham stroke from a to b (x = column, y = row); out-of-bounds pixels
/// are dropped silently.
inline void draw_stroke(Array2D<int>& img, const Vec2& a, const Vec2& b, int value) {
    int x0 = static_cast<int>(std::lround(a.x)), y0 = static_cast<int>(std::lround(a.y));
    const int x1 = static_cast<int>(std::lround(b.x)), y1 = static_cast<int>(std::lround(b.y));
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        if (img.in_bounds(y0, x0))
            img(y0, x0) = value;
        if (x0 == x1 && y0 == y1)
            break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

}  // namespace detail

inline constexpr int kOverlayGray = 128;  ///< gray level of rendered lines

/// P2 PGM, 0 = background, 255 = transition pixel.
inline void save_map_pgm(const TransitionMap& map, const std::string& path) {
    if (map.mask.empty())
        throw ConfigError("save_map_pgm: empty map");
    Array2D<int> img(map.mask.rows(), map.mask.cols(), 0);
    for (int r = 0; r < img.rows(); ++r)
        for (int c = 0; c < img.cols(); ++c)
            if (map.mask(r, c))
                img(r, c) = 255;
    detail::write_pgm(img, path);
}

/// Mask render plus every line chain drawn on top at kOverlayGray, one
/// Bresenham stroke per chained segment.
inline void save_overlay(const TransitionMap& map, const std::vector<TransitionLine>& lines,
                         const std::string& path) {
    if (map.mask.empty())
        throw ConfigError("save_overlay: empty map");
    Array2D<int> img(map.mask.rows(), map.mask.cols(), 0);
    for (int r = 0; r < img.rows(); ++r)
        for (int c = 0; c < img.cols(); ++c)
            if (map.mask(r, c))
                img(r, c) = 255;
    for (const auto& line : lines)
        for (const auto& seg : line.segments)
            detail::draw_stroke(img, seg.p0, seg.p1, kOverlayGray);
    detail::write_pgm(img, path);
}

/// Reads a P2 PGM back as a transition map on a unit pixel grid (both axes
/// start at 0 mV with 1 mV steps); pixels brighter than maxval/2 count as
/// transition pixels. '#' comments are honored anywhere in the header/raster.
inline TransitionMap load_map_pgm(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open '" + path + "'");
    auto next_token = [&]() -> std::string {
        std::string t;
        while (in >> t) {
            if (t[0] == '#') {
                std::getline(in, t);
                continue;
            }
            return t;
        }
        throw IoError(path + ": truncated PGM");
    };
    if (next_token() != "P2")
        throw IoError(path + ": not a P2 PGM");
    const long long w = detail::parse_integer(next_token(), path + ": width");
    const long long h = detail::parse_integer(next_token(), path + ": height");
    const long long maxval = detail::parse_integer(next_token(), path + ": maxval");
    if (w < 1 || h < 1)
        throw IoError(path + ": empty image");
    if (maxval < 1 || maxval > 65535)
        throw IoError(path + ": maxval outside [1, 65535]");

    TransitionMap map;
    map.window = {0.0, static_cast<double>(w - 1), 1.0, 0.0, static_cast<double>(h - 1), 1.0};
    map.mask = Array2D<std::uint8_t>(static_cast<int>(h), static_cast<int>(w), 0);
    map.row_status.assign(static_cast<std::size_t>(h), RowStatus::Ok);
    for (int r = 0; r < static_cast<int>(h); ++r)
        for (int c = 0; c < static_cast<int>(w); ++c) {
            const long long v = detail::parse_integer(next_token(), path + ": pixel");
            if (v < 0 || v > maxval)
                throw IoError(path + ": pixel value outside [0, maxval]");
            map.mask(r, c) = 2 * v > maxval ? 1 : 0;
        }
    return map;
}

// ============================================================================
// Device configuration files
// ============================================================================

/// Dialect: one "key = value" per line, '#' starts a comment, blank lines
/// ignored. Scalar keys use dotted names for nested groups (amplitude.base,
/// background.ripple_amp, noise.white_sigma, ...). Repeatable keys:
///   transition = electron_number vg1_at_ref slope curvature
///   dead_zone  = vg1_center vg2_center vg1_sigma vg2_sigma depth
/// Unknown keys are rejected; the assembled config is validated before use.
inline DeviceConfig parse_device_config(std::istream& in, const std::string& name) {
    DeviceConfig c;
    const std::map<std::string, double*> scalars {
        {"vg1_min", &c.vg1_min},
        {"vg1_max", &c.vg1_max},
        {"vg2_min", &c.vg2_min},
        {"vg2_max", &c.vg2_max},
        {"set_frequency", &c.set_frequency},
        {"phase_jump", &c.phase_jump},
        {"transition_width", &c.transition_width},
        {"broadening_growth", &c.broadening_growth},
        {"visibility_factor", &c.visibility_factor},
        {"vg2_ref", &c.vg2_ref},
        {"amplitude.base", &c.amplitude.base},
        {"amplitude.tilt_vg1", &c.amplitude.tilt_vg1},
        {"amplitude.tilt_vg2", &c.amplitude.tilt_vg2},
        {"background.offset", &c.background.offset},
        {"background.slope_vg1", &c.background.slope_vg1},
        {"background.slope_vg2", &c.background.slope_vg2},
        {"background.quad_vg1", &c.background.quad_vg1},
        {"background.ripple_amp", &c.background.ripple_amp},
        {"background.ripple_freq", &c.background.ripple_freq},
        {"background.ripple_phase", &c.background.ripple_phase},
        {"noise.white_sigma", &c.noise.white_sigma},
        {"noise.telegraph_amplitude", &c.noise.telegraph_amplitude},
        {"noise.telegraph_switch_rate", &c.noise.telegraph_switch_rate},
        {"noise.charge_jitter_sigma", &c.noise.charge_jitter_sigma},
    };

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = detail::trim(line);
        if (line.empty())
            continue;
        const std::string where = name + " line " + std::to_string(line_no);

        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const auto toks = detail::split_tokens(line.substr(eq + 1));
        auto want = [&](std::size_t n) {
            if (toks.size() != n)
                throw ConfigError(where + ": '" + key + "' takes " + std::to_string(n) +
                                  " value(s), got " + std::to_string(toks.size()));
        };

        try {
            if (key == "seed") {
                want(1);
                const long long v = detail::parse_integer(toks[0], where);
                if (v < 0)
                    throw ConfigError(where + ": seed must be >= 0");
                c.seed = static_cast<std::uint64_t>(v);
            } else if (key == "transition") {
                want(4);
                TransitionCurve t;
                t.electron_number = static_cast<int>(detail::parse_integer(toks[0], where));
                t.vg1_at_ref = detail::parse_double(toks[1], where);
                t.slope = detail::parse_double(toks[2], where);
                t.curvature = detail::parse_double(toks[3], where);
                c.transitions.push_back(t);
            } else if (key == "dead_zone") {
                want(5);
                AmplitudeModel::DeadZone dz;
                dz.vg1_center = detail::parse_double(toks[0], where);
                dz.vg2_center = detail::parse_double(toks[1], where);
                dz.vg1_sigma = detail::parse_double(toks[2], where);
                dz.vg2_sigma = detail::parse_double(toks[3], where);
                dz.depth = detail::parse_double(toks[4], where);
                c.amplitude.dead_zones.push_back(dz);
            } else if (const auto it = scalars.find(key); it != scalars.end()) {
                want(1);
                *it->second = detail::parse_double(toks[0], where);
            } else {
                throw ConfigError(where + ": unknown key '" + key + "'");
            }
        } catch (const IoError& e) {
            throw ConfigError(e.what());  // bad value text is a config problem
        }
    }
    DeviceModel::validate(c);
    return c;
}

inline DeviceConfig load_device_config(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open '" + path + "'");
    return parse_device_config(in, path);
}

inline void save_device_config(const DeviceConfig& c, const std::string& path) {
    auto f = detail::open_file(path, "w");
    std::fprintf(f.get(), "seed = %llu\n", static_cast<unsigned long long>(c.seed));
    const std::pair<const char*, double> scalars[] = {
        {"vg1_min", c.vg1_min},
        {"vg1_max", c.vg1_max},
        {"vg2_min", c.vg2_min},
        {"vg2_max", c.vg2_max},
        {"set_frequency", c.set_frequency},
        {"phase_jump", c.phase_jump},
        {"transition_width", c.transition_width},
        {"broadening_growth", c.broadening_growth},
        {"visibility_factor", c.visibility_factor},
        {"vg2_ref", c.vg2_ref},
        {"amplitude.base", c.amplitude.base},
        {"amplitude.tilt_vg1", c.amplitude.tilt_vg1},
        {"amplitude.tilt_vg2", c.amplitude.tilt_vg2},
        {"background.offset", c.background.offset},
        {"background.slope_vg1", c.background.slope_vg1},
        {"background.slope_vg2", c.background.slope_vg2},
        {"background.quad_vg1", c.background.quad_vg1},
        {"background.ripple_amp", c.background.ripple_amp},
        {"background.ripple_freq", c.background.ripple_freq},
        {"background.ripple_phase", c.background.ripple_phase},
        {"noise.white_sigma", c.noise.white_sigma},
        {"noise.telegraph_amplitude", c.noise.telegraph_amplitude},
        {"noise.telegraph_switch_rate", c.noise.telegraph_switch_rate},
        {"noise.charge_jitter_sigma", c.noise.charge_jitter_sigma},
    };
    for (const auto& [key, value] : scalars)
        std::fprintf(f.get(), "%s = %.17g\n", key, value);
    for (const auto& t : c.transitions)
        std::fprintf(f.get(), "transition = %d %.17g %.17g %.17g\n", t.electron_number,
                     t.vg1_at_ref, t.slope, t.curvature);
    for (const auto& dz : c.amplitude.dead_zones)
        std::fprintf(f.get(), "dead_zone = %.17g %.17g %.17g %.17g %.17g\n", dz.vg1_center,
                     dz.vg2_center, dz.vg1_sigma, dz.vg2_sigma, dz.depth);
    detail::check_write(f.get(), path);
}

// ============================================================================
// JSON report pieces
// ============================================================================

inline Json to_json(const MeasurementWindow& w) {
    return Json {{"vg1_start", w.vg1_start}, {"vg1_stop", w.vg1_stop}, {"vg1_step", w.vg1_step},
                 {"vg2_start", w.vg2_start}, {"vg2_stop", w.vg2_stop}, {"vg2_step", w.vg2_step}};
}

/// Line endpoints in pixel and physical coordinates of the given window.
inline Json to_json(const TransitionLine& l, const MeasurementWindow& w) {
    const PhysPoint a = to_physical(l.e0, w);
    const PhysPoint b = to_physical(l.e1, w);
    return Json {
        {"support", l.support},
        {"segments", l.segments.size()},
        {"axis_angle_deg", l.axis_angle * 180.0 / kPi},
        {"endpoints_px", Json::array({Json::array({l.e0.x, l.e0.y}),
                                      Json::array({l.e1.x, l.e1.y})})},
        {"endpoints_mv", Json::array({Json::array({a.vg1, a.vg2}),
                                      Json::array({b.vg1, b.vg2})})},
    };
}

inline Json to_json(const SignalParams& p) {
    return Json {{"filter_order", p.filter_order},
                 {"cutoff_halfwidths", p.cutoff_halfwidths},
                 {"min_cutoff_frac", p.min_cutoff_frac},
                 {"threshold_k", p.threshold_k},
                 {"sigma_floor_frac", p.sigma_floor_frac},
                 {"edge_guard_frac", p.edge_guard_frac},
                 {"peak_prominence", p.peak_prominence},
                 {"min_fit_bins", p.min_fit_bins},
                 {"median_prefilter", p.median_prefilter},
                 {"pooled_stats", p.pooled_stats},
                 {"fixed_cutoff", p.fixed_cutoff}};
}

inline Json to_json(const ReconstructionParams& p) {
    return Json {{"angle_tol_deg", p.angle_tol * 180.0 / kPi},
                 {"offset_tol", p.offset_tol},
                 {"gap_max", p.gap_max},
                 {"width_prior", p.width_prior},
                 {"min_line_support", p.min_line_support}};
}

inline Json to_json(const HoughParams& p) {
    return Json {{"min_cluster", p.min_cluster},
                 {"residual_factor", p.residual_factor},
                 {"recon", to_json(p.recon)}};
}

inline Json to_json(const EdlinesParams& p) {
    return Json {{"sigma", p.sigma},
                 {"anchor_threshold", p.anchor_threshold},
                 {"magnitude_floor", p.magnitude_floor},
                 {"fit_error_max", p.fit_error_max},
                 {"min_seg_len", p.min_seg_len},
                 {"doublon_angle_deg", p.doublon_angle * 180.0 / kPi},
                 {"doublon_overlap", p.doublon_overlap},
                 {"recon", to_json(p.recon)}};
}

inline Json to_json(const DeviceConfig& c) {
    Json transitions = Json::array();
    for (const auto& t : c.transitions)
        transitions.push_back(Json {{"electron_number", t.electron_number},
                                    {"vg1_at_ref", t.vg1_at_ref},
                                    {"slope", t.slope},
                                    {"curvature", t.curvature}});
    Json dead_zones = Json::array();
    for (const auto& dz : c.amplitude.dead_zones)
        dead_zones.push_back(Json {{"vg1_center", dz.vg1_center},
                                   {"vg2_center", dz.vg2_center},
                                   {"vg1_sigma", dz.vg1_sigma},
                                   {"vg2_sigma", dz.vg2_sigma},
                                   {"depth", dz.depth}});
    return Json {
        {"seed", c.seed},
        {"vg1_min", c.vg1_min},
        {"vg1_max", c.vg1_max},
        {"vg2_min", c.vg2_min},
        {"vg2_max", c.vg2_max},
        {"set_frequency", c.set_frequency},
        {"phase_jump", c.phase_jump},
        {"transition_width", c.transition_width},
        {"broadening_growth", c.broadening_growth},
        {"visibility_factor", c.visibility_factor},
        {"vg2_ref", c.vg2_ref},
        {"amplitude",
         Json {{"base", c.amplitude.base},
               {"tilt_vg1", c.amplitude.tilt_vg1},
               {"tilt_vg2", c.amplitude.tilt_vg2},
               {"dead_zones", dead_zones}}},
        {"background",
         Json {{"offset", c.background.offset},
               {"slope_vg1", c.background.slope_vg1},
               {"slope_vg2", c.background.slope_vg2},
               {"quad_vg1", c.background.quad_vg1},
               {"ripple_amp", c.background.ripple_amp},
               {"ripple_freq", c.background.ripple_freq},
               {"ripple_phase", c.background.ripple_phase}}},
        {"noise",
         Json {{"white_sigma", c.noise.white_sigma},
               {"telegraph_amplitude", c.noise.telegraph_amplitude},
               {"telegraph_switch_rate", c.noise.telegraph_switch_rate},
               {"charge_jitter_sigma", c.noise.charge_jitter_sigma}}},
        {"transitions", transitions},
    };
}

inline Json to_json(const TuneConfig& c) {
    return Json {
        {"start_window", to_json(c.start_window)},
        {"window_height_px", c.window_height_px},
        {"cycles_required", c.cycles_required},
        {"cycles_per_window", c.cycles_per_window},
        {"diagonal_step", c.diagonal_step},
        {"confirm_scale", c.confirm_scale},
        {"broaden_patience", c.broaden_patience},
        {"follow_gap_rows", c.follow_gap_rows},
        {"descend_overlap", c.descend_overlap},
        {"empty_margin_mv", c.empty_margin_mv},
        {"max_measurements", c.max_measurements},
        {"detector", to_string(c.detector)},
        {"final_offset_widths", c.final_offset_widths},
        {"match_tol_frac", c.match_tol_frac},
        {"signal", to_json(c.signal)},
        {"hough", to_json(c.hough)},
        {"edlines", to_json(c.edlines)},
    };
}

/// Per-row chain status counts of a map.
inline Json row_status_json(const TransitionMap& map) {
    int counts[4] = {0, 0, 0, 0};
    for (const auto s : map.row_status)
        ++counts[static_cast<int>(s)];
    return Json {{"ok", counts[0]},
                 {"no_peak", counts[1]},
                 {"unseparable", counts[2]},
                 {"degenerate", counts[3]}};
}

inline Json to_json(const TuneResult& r) {
    Json lines = Json::array();
    for (const auto& l : r.all_lines)
        lines.push_back(to_json(l, r.global_window));
    Json log = Json::array();
    for (const auto& rec : r.log)
        log.push_back(Json {{"phase", to_string(rec.phase)},
                            {"window", to_json(rec.map.window)},
                            {"active_pixels", rec.map.active_pixels()},
                            {"rows", row_status_json(rec.map)},
                            {"lines", rec.lines.size()}});
    Json j {
        {"success", r.success},
        {"failure", to_string(r.failure)},
        {"message", r.message},
        {"reference_vg2_mv", r.reference_vg2.mv},
        {"background_frequency", r.background_frequency},
        {"cutoff", r.cutoff},
        {"window_width_px", r.window_width_px},
        {"budget_used", r.budget_used},
        {"lines", lines},
        {"log", log},
        {"config", to_json(r.config)},
    };
    if (r.success) {
        j["final_vg1_mv"] = r.final_vg1.mv;
        j["final_vg2_mv"] = r.final_vg2.mv;
    }
    if (!r.all_lines.empty())
        j["global_window"] = to_json(r.global_window);
    return j;
}

// ============================================================================
// Reports
// ============================================================================

inline Json make_report(const std::string& command) {
    return Json {{"tool", "dottuner"},
                 {"version", kToolVersion},
                 {"command", command},
                 {"timings_ms", Json::object()},
                 {"artifacts", Json::object()}};
}

inline void write_report(const Json& report, const std::string& path) {
    auto f = detail::open_file(path, "w");
    const std::string text = report.dump(2);
    std::fwrite(text.data(), 1, text.size(), f.get());
    std::fputc('\n', f.get());
    detail::check_write(f.get(), path);
}

inline Json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open '" + path + "'");
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw IoError(path + ": " + e.what());
    }
}

// ============================================================================
// Schema validation (subset)
// ============================================================================

namespace detail {

inline void validate_node(const Json& doc, const Json& schema, const Json& root,
                          const std::string& path);

/// Fragment-only $ref resolution ("#/definitions/..." against the root).
inline const Json& resolve_ref(const std::string& ref, const Json& root) {
    if (ref.empty() || ref[0] != '#')
        throw IoError("schema: only fragment $refs are supported, got '" + ref + "'");
    const Json* node = &root;
    std::size_t i = 1;
    while (i < ref.size()) {
        if (ref[i] == '/') {
            ++i;
            continue;
        }
        const std::size_t j = ref.find('/', i);
        const std::string key = ref.substr(i, j == std::string::npos ? j : j - i);
        const auto it = node->find(key);
        if (it == node->end())
            throw IoError("schema: unresolved $ref '" + ref + "'");
        node = &*it;
        i = j == std::string::npos ? ref.size() : j;
    }
    return *node;
}

inline void validate_node(const Json& doc, const Json& schema, const Json& root,
                          const std::string& path) {
    if (const auto it = schema.find("$ref"); it != schema.end()) {
        validate_node(doc, resolve_ref(it->get<std::string>(), root), root, path);
        return;
    }
    if (const auto it = schema.find("type"); it != schema.end()) {
        const std::string t = it->get<std::string>();
        bool ok = false;
        if (t == "object")
            ok = doc.is_object();
        else if (t == "array")
            ok = doc.is_array();
        else if (t == "string")
            ok = doc.is_string();
        else if (t == "integer")
            ok = doc.is_number_integer();
        else if (t == "number")
            ok = doc.is_number();
        else if (t == "boolean")
            ok = doc.is_boolean();
        else
            throw IoError("schema: unsupported type '" + t + "' at " + path);
        if (!ok)
            throw IoError("report: " + path + ": expected " + t);
    }
    if (const auto it = schema.find("enum"); it != schema.end()) {
        bool hit = false;
        for (const auto& v : *it)
            hit = hit || v == doc;
        if (!hit)
            throw IoError("report: " + path + ": value not in enum");
    }
    if (const auto it = schema.find("minimum"); it != schema.end())
        if (doc.is_number() && doc.get<double>() < it->get<double>())
            throw IoError("report: " + path + ": below minimum");
    if (doc.is_object()) {
        if (const auto it = schema.find("required"); it != schema.end())
            for (const auto& name : *it)
                if (!doc.contains(name.get<std::string>()))
                    throw IoError("report: " + path + ": missing required key '" +
                                  name.get<std::string>() + "'");
        const auto props = schema.find("properties");
        if (props != schema.end())
            for (auto it2 = doc.begin(); it2 != doc.end(); ++it2)
                if (const auto ps = props->find(it2.key()); ps != props->end())
                    validate_node(it2.value(), *ps, root, path + "." + it2.key());
        if (const auto ap = schema.find("additionalProperties");
            ap != schema.end() && ap->is_boolean() && !ap->get<bool>())
            for (auto it2 = doc.begin(); it2 != doc.end(); ++it2)
                if (props == schema.end() || props->find(it2.key()) == props->end())
                    throw IoError("report: " + path + ": unexpected key '" + it2.key() + "'");
    }
    if (doc.is_array())
        if (const auto it = schema.find("items"); it != schema.end())
            for (std::size_t i = 0; i < doc.size(); ++i)
                validate_node(doc[i], *it, root,
                              path + "[" + std::to_string(i) + "]");
}

}  // namespace detail

/// Checks a report against the shipped schema subset (type, required,
/// properties, additionalProperties, items, enum, minimum, fragment $refs).
/// Throws IoError naming the failing location.
inline void validate_report(const Json& report, const Json& schema) {
    detail::validate_node(report, schema, schema, "$");
}

}  // namespace dottuner
