#pragma once

// Adaptive measurement state machine. Samples small sub-diagrams from a
// measurement source, follows charge transitions toward the empty-dot
// corner of gate space, then analyzes the union of all measurements to
// locate the first (lowest-vg1) transition and park the gates one electron
// above it. All windows live on one fixed voltage lattice so pixel masks
// from different measurements can be combined loss-free.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dottuner/core.hpp"
#include "dottuner/device.hpp"
#include "dottuner/edlines.hpp"
#include "dottuner/geometry.hpp"
#include "dottuner/hough.hpp"
#include "dottuner/signal.hpp"

namespace dottuner {

// ============================================================================
// Measurement sources
// ============================================================================

/// Rectangular region of gate space a source can reach, in mV.
struct GateRange {
    double vg1_min {0.0};
    double vg1_max {0.0};
    double vg2_min {0.0};
    double vg2_max {0.0};
};

/// Anything the tuner can measure: a live (simulated) device or a stored
/// large diagram that is re-sampled window by window.
class MeasurementSource {
public:
    virtual ~MeasurementSource() = default;

    [[nodiscard]] virtual GateRange range() const = 0;

    /// Raster scan of a window inside range().
    [[nodiscard]] virtual StabilityDiagram measure(const MeasurementWindow& w) = 0;

    /// Single vg1 sweep at fixed vg2.
    [[nodiscard]] virtual std::vector<double> sweep(double vg2, double vg1_start,
                                                    double vg1_stop, double vg1_step) = 0;
};

/// Live simulated device.
class SimulatorSource final : public MeasurementSource {
public:
    explicit SimulatorSource(const DeviceModel& device) : device_(&device) {}

    [[nodiscard]] GateRange range() const override {
        const DeviceConfig& c = device_->config();
        return {c.vg1_min, c.vg1_max, c.vg2_min, c.vg2_max};
    }

    [[nodiscard]] StabilityDiagram measure(const MeasurementWindow& w) override {
        return device_->measure_diagram(w);
    }

    [[nodiscard]] std::vector<double> sweep(double vg2, double vg1_start, double vg1_stop,
                                            double vg1_step) override {
        return device_->measure_sweep(vg2, vg1_start, vg1_stop, vg1_step);
    }

private:
    const DeviceModel* device_;
};

/// Previously recorded diagram; windows must align with the stored grid.
class DiagramSource final : public MeasurementSource {
public:
    explicit DiagramSource(StabilityDiagram diagram) : d_(std::move(diagram)) { d_.validate(); }

    [[nodiscard]] GateRange range() const override {
        return {d_.window.vg1_start, d_.window.vg1_stop, d_.window.vg2_start, d_.window.vg2_stop};
    }

    [[nodiscard]] StabilityDiagram measure(const MeasurementWindow& w) override {
        w.validate();
        const long long c0 = aligned_index(w.vg1_start, d_.window.vg1_start, d_.window.vg1_step,
                                           "vg1_start");
        const long long r0 = aligned_index(w.vg2_start, d_.window.vg2_start, d_.window.vg2_step,
                                           "vg2_start");
        check_step(w.vg1_step, d_.window.vg1_step, "vg1_step");
        check_step(w.vg2_step, d_.window.vg2_step, "vg2_step");
        if (c0 < 0 || r0 < 0 || c0 + w.cols() > d_.window.cols() ||
            r0 + w.rows() > d_.window.rows())
            throw ConfigError("diagram source: window outside the stored diagram");
        StabilityDiagram out;
        out.window = w;
        out.data = Array2D<double>(w.rows(), w.cols());
        for (int r = 0; r < w.rows(); ++r)
            for (int c = 0; c < w.cols(); ++c)
                out.data(r, c) = d_.data(static_cast<int>(r0) + r, static_cast<int>(c0) + c);
        return out;
    }

    [[nodiscard]] std::vector<double> sweep(double vg2, double vg1_start, double vg1_stop,
                                            double vg1_step) override {
        MeasurementWindow w {vg1_start, vg1_stop, vg1_step, vg2, vg2, d_.window.vg2_step};
        const auto row = measure(w);
        std::vector<double> out(static_cast<std::size_t>(row.data.cols()));
        for (int c = 0; c < row.data.cols(); ++c)
            out[static_cast<std::size_t>(c)] = row.data(0, c);
        return out;
    }

    [[nodiscard]] const StabilityDiagram& diagram() const { return d_; }

private:
    static void check_step(double got, double want, const char* name) {
        if (std::abs(got - want) > 1e-9 * std::max(1.0, std::abs(want)))
            throw ConfigError(std::string("diagram source: ") + name +
                              " does not match the stored grid");
    }

    static long long aligned_index(double v, double origin, double step, const char* name) {
        const long long k = nearest_index((v - origin) / step);
        if (k < 0 && std::abs(v - origin) > 1e-9)
            throw ConfigError(std::string("diagram source: ") + name +
                              " is off the stored grid");
        return std::max<long long>(k, 0);
    }

    StabilityDiagram d_;
};

// ============================================================================
// Configuration and results
// ============================================================================

enum class DetectorKind : std::uint8_t { kHough, kEdlines };

inline const char* to_string(DetectorKind k) {
    return k == DetectorKind::kHough ? "hough" : "edlines";
}

enum class TunePhase : std::uint8_t {
    kSearchDiagonal,
    kConfirm,
    kFollowUp,
    kDescend,
    kGlobalAnalysis,
    kConfirmFirst,
    kDone,
    kFailed,
};

inline const char* to_string(TunePhase p) {
    switch (p) {
    case TunePhase::kSearchDiagonal: return "search_diagonal";
    case TunePhase::kConfirm: return "confirm";
    case TunePhase::kFollowUp: return "follow_up";
    case TunePhase::kDescend: return "descend";
    case TunePhase::kGlobalAnalysis: return "global_analysis";
    case TunePhase::kConfirmFirst: return "confirm_first";
    case TunePhase::kDone: return "done";
    case TunePhase::kFailed: return "failed";
    }
    return "unknown";
}

enum class TuneFailure : std::uint8_t {
    kNone,
    kNoOscillation,       ///< preliminary sweep found no spectral peak
    kNoTransitionsInRange,///< diagonal search cornered without a detection
    kBudgetExhausted,     ///< max_measurements reached
    kNothingDetected,     ///< global analysis produced no usable lines
    kFirstUnconfirmed,    ///< first transition failed its confirmation scan
};

inline const char* to_string(TuneFailure f) {
    switch (f) {
    case TuneFailure::kNone: return "none";
    case TuneFailure::kNoOscillation: return "no_oscillation";
    case TuneFailure::kNoTransitionsInRange: return "no_transitions_in_range";
    case TuneFailure::kBudgetExhausted: return "budget_exhausted";
    case TuneFailure::kNothingDetected: return "nothing_detected";
    case TuneFailure::kFirstUnconfirmed: return "first_unconfirmed";
    }
    return "unknown";
}

struct TuneConfig {
    /// User-chosen first scan region; also fixes both step sizes and the
    /// lattice origin for every window of the run.
    MeasurementWindow start_window {};

    int window_height_px {40};     ///< rows per sub-diagram
    double cycles_required {1.5};  ///< minimum oscillation cycles per row (width rule)
    double cycles_per_window {7.5};///< cycles per row actually measured
    double diagonal_step {0.75};   ///< diagonal displacement, fraction of window size
    double confirm_scale {2.0};    ///< confirmation windows scale both axes by this
    int broaden_patience {2};      ///< consecutive misses before a line counts as gone
    int follow_gap_rows {5};       ///< blank rows left between follow-up windows
    double descend_overlap {0.10}; ///< column overlap between descend windows
    double empty_margin_mv {0.0};  ///< 0 = auto: max(50, 1.5*window, 3*largest spacing)
    int max_measurements {200};    ///< measurement budget (sweeps count too)
    DetectorKind detector {DetectorKind::kHough};
    double final_offset_widths {5.0}; ///< final vg1 offset, multiples of the line width
    double match_tol_frac {0.3};   ///< line-match tolerance, fraction of window width

    SignalParams signal;
    HoughParams hough;
    EdlinesParams edlines;

    /// Short windows carry few oscillation cycles, so the per-row frequency
    /// statistics run on fewer samples; a milder threshold keeps the dips
    /// detectable while cluster-size filters absorb the extra false pixels.
    TuneConfig() { signal.threshold_k = 2.0; }

    void validate() const {
        start_window.validate();
        const int min_support = detector == DetectorKind::kHough
                                    ? hough.recon.min_line_support
                                    : edlines.recon.min_line_support;
        if (window_height_px < std::max(2, min_support))
            throw ConfigError("tune: window_height_px below min_line_support");
        if (!(diagonal_step > 0.0) || diagonal_step > 1.0)
            throw ConfigError("tune: diagonal_step outside (0, 1]");
        if (!(confirm_scale > 1.0))
            throw ConfigError("tune: confirm_scale must be > 1");
        if (broaden_patience < 1)
            throw ConfigError("tune: broaden_patience must be >= 1");
        if (follow_gap_rows < 0)
            throw ConfigError("tune: follow_gap_rows must be >= 0");
        if (descend_overlap < 0.0 || descend_overlap > 0.9)
            throw ConfigError("tune: descend_overlap outside [0, 0.9]");
        if (empty_margin_mv < 0.0)
            throw ConfigError("tune: empty_margin_mv must be >= 0");
        if (max_measurements < 1)
            throw ConfigError("tune: max_measurements must be >= 1");
        if (!(cycles_required > 0.0) || !(cycles_per_window > 0.0))
            throw ConfigError("tune: cycle counts must be > 0");
        if (!(final_offset_widths > 0.0))
            throw ConfigError("tune: final_offset_widths must be > 0");
        if (!(match_tol_frac > 0.0) || match_tol_frac > 1.0)
            throw ConfigError("tune: match_tol_frac outside (0, 1]");
    }
};

/// One measured-and-analyzed sub-diagram.
struct MeasurementRecord {
    TunePhase phase {TunePhase::kSearchDiagonal};  ///< phase that requested it
    StabilityDiagram diagram;
    TransitionMap map;
    std::vector<TransitionLine> lines;
};

struct TuneResult {
    bool success {false};
    TuneFailure failure {TuneFailure::kNone};
    std::string message;

    GateVoltage final_vg1 {};
    GateVoltage final_vg2 {};
    GateVoltage reference_vg2 {};  ///< bottom edge of the explored region

    std::optional<TransitionLine> first_transition;  ///< pixel coords of global_window
    std::vector<TransitionLine> all_lines;           ///< sorted by vg1 at reference_vg2
    MeasurementWindow global_window {};              ///< frame of the union analysis
    /// OR-union of every mask measured before global analysis; this is the
    /// exact detector input, so lines and map stay consistent. The later
    /// confirming scan is logged but not folded back in.
    TransitionMap global_map;

    double background_frequency {0.0};  ///< cycles per volt, from the preliminary sweep
    double cutoff {0.0};                ///< high-pass cutoff reused for every window
    int window_width_px {0};
    int budget_used {0};

    std::vector<MeasurementRecord> log;
    TuneConfig config;
};

// ============================================================================
// Preliminary sweep
// ============================================================================

struct PreliminaryResult {
    double frequency {0.0};  ///< dominant non-DC peak, cycles per volt
    int width_px {0};        ///< pixels needed for cycles_required full cycles
    double cutoff {0.0};     ///< background cutoff fitted on the long sweep
};

/// Single long vg1 sweep: locates the sensor-oscillation frequency, derives
/// the minimum window width from it, and fits the background cutoff once so
/// later short windows can skip their own spectral fit.
/// Throws NoPeakError when no oscillation rises above the noise floor.
inline PreliminaryResult preliminary_sweep(MeasurementSource& source, double vg2,
                                           double vg1_start, double vg1_stop, double vg1_step,
                                           double cycles_required = 1.5,
                                           const SignalParams& params = {}) {
    const auto trace = source.sweep(vg2, vg1_start, vg1_stop, vg1_step);
    const Spectrum spec = power_spectrum(trace, vg1_step);

    // The slow background occupies the lowest bins; the oscillation is the
    // prominent peak beyond the first spectral minimum.
    const SpectralLandmarks lm = find_landmarks(spec, params.peak_prominence);

    PreliminaryResult r;
    r.frequency = spec.freq[static_cast<std::size_t>(lm.peak)];
    const double step_volts = vg1_step * 1e-3;
    r.width_px = static_cast<int>(std::ceil(cycles_required / (r.frequency * step_volts) - 1e-9));

    try {
        r.cutoff = background_cutoff(spec, params).cutoff;
    } catch (const SignalError&) {
        // Background too weak to fit; fall back to the fractional floor.
        r.cutoff = params.min_cutoff_frac * r.frequency;
    }
    return r;
}

// ============================================================================
// Tuner
// ============================================================================

/// Drives the measurement sequence one action per step() call:
/// SEARCH_DIAGONAL -> CONFIRM -> FOLLOW_UP -> DESCEND (recursing through
/// CONFIRM for each next line) -> GLOBAL_ANALYSIS -> CONFIRM_FIRST -> DONE.
class Tuner {
public:
    Tuner(MeasurementSource& source, TuneConfig cfg) : src_(&source), cfg_(std::move(cfg)) {
        cfg_.validate();
        result_.config = cfg_;
        o1_ = cfg_.start_window.vg1_start;
        o2_ = cfg_.start_window.vg2_start;
        s1_ = cfg_.start_window.vg1_step;
        s2_ = cfg_.start_window.vg2_step;

        const GateRange gr = src_->range();
        i1_min_ = idx_ceil(gr.vg1_min, o1_, s1_);
        i1_max_ = idx_floor(gr.vg1_max, o1_, s1_);
        i2_min_ = idx_ceil(gr.vg2_min, o2_, s2_);
        i2_max_ = idx_floor(gr.vg2_max, o2_, s2_);
        if (i1_max_ - i1_min_ + 1 < kMinTraceLength || i2_max_ < i2_min_)
            throw ConfigError("tune: source range too small for the lattice");
    }

    [[nodiscard]] TunePhase phase() const { return phase_; }
    [[nodiscard]] int budget_used() const { return budget_used_; }
    [[nodiscard]] const std::vector<MeasurementRecord>& log() const { return result_.log; }

    /// Performs one action (a measurement or an analysis pass).
    /// Returns false once the machine is terminal.
    bool step() {
        if (phase_ == TunePhase::kDone || phase_ == TunePhase::kFailed)
            return false;
        if (!prelim_done_) {
            run_preliminary();
            return phase_ != TunePhase::kFailed;
        }
        switch (phase_) {
        case TunePhase::kSearchDiagonal: step_search(); break;
        case TunePhase::kConfirm: step_confirm(); break;
        case TunePhase::kFollowUp: step_follow(); break;
        case TunePhase::kDescend: step_descend(); break;
        case TunePhase::kGlobalAnalysis: step_global(); break;
        case TunePhase::kConfirmFirst: step_confirm_first(); break;
        default: break;
        }
        return phase_ != TunePhase::kDone && phase_ != TunePhase::kFailed;
    }

    /// Runs to a terminal phase and returns the assembled result.
    TuneResult run() {
        while (step()) {
        }
        return result();
    }

    [[nodiscard]] TuneResult result() const {
        TuneResult r = result_;
        r.budget_used = budget_used_;
        return r;
    }

private:
    // ---- lattice helpers -------------------------------------------------

    struct LatticeWindow {
        long i1 {0};  ///< column index of the low-vg1 edge
        long i2 {0};  ///< row index of the low-vg2 edge
        int n1 {0};
        int n2 {0};
    };

    static long idx_floor(double v, double o, double s) {
        return static_cast<long>(std::floor((v - o) / s + 1e-9));
    }
    static long idx_ceil(double v, double o, double s) {
        return static_cast<long>(std::ceil((v - o) / s - 1e-9));
    }
    static long idx_round(double v, double o, double s) {
        return static_cast<long>(std::llround((v - o) / s));
    }

    [[nodiscard]] double vg1_of(long i) const { return o1_ + static_cast<double>(i) * s1_; }
    [[nodiscard]] double vg2_of(long i) const { return o2_ + static_cast<double>(i) * s2_; }

    [[nodiscard]] LatticeWindow clamp_window(long i1, long i2, int n1, int n2) const {
        n1 = static_cast<int>(std::min<long>(n1, i1_max_ - i1_min_ + 1));
        n2 = static_cast<int>(std::min<long>(n2, i2_max_ - i2_min_ + 1));
        i1 = std::clamp(i1, i1_min_, i1_max_ - (n1 - 1));
        i2 = std::clamp(i2, i2_min_, i2_max_ - (n2 - 1));
        return {i1, i2, n1, n2};
    }

    [[nodiscard]] MeasurementWindow to_window(const LatticeWindow& w) const {
        return {vg1_of(w.i1), vg1_of(w.i1 + w.n1 - 1), s1_,
                vg2_of(w.i2), vg2_of(w.i2 + w.n2 - 1), s2_};
    }

    // ---- measurement -----------------------------------------------------

    /// Measures, processes and detects one window; returns nullptr when the
    /// budget is exhausted (machine flipped to FAILED).
    const MeasurementRecord* measure_window(const LatticeWindow& lw) {
        if (budget_used_ >= cfg_.max_measurements) {
            fail(TuneFailure::kBudgetExhausted, "measurement budget exhausted");
            return nullptr;
        }
        ++budget_used_;
        MeasurementRecord rec;
        rec.phase = phase_;
        rec.diagram = src_->measure(to_window(lw));
        rec.map = process_diagram(rec.diagram, signal_);
        rec.lines = cfg_.detector == DetectorKind::kHough
                        ? detect_lines_hough(rec.map, cfg_.hough)
                        : detect_lines_edlines(rec.map, cfg_.edlines);
        result_.log.push_back(std::move(rec));
        return &result_.log.back();
    }

    // ---- line bookkeeping ------------------------------------------------

    /// Physical-space track of one transition: vg1 locus as a line in vg2.
    struct LineTrack {
        double vg1_ref {0.0};
        double vg2_ref {0.0};
        double slope {0.0};  ///< d(vg1)/d(vg2)

        [[nodiscard]] double at(double vg2) const { return vg1_ref + slope * (vg2 - vg2_ref); }
    };

    /// Track from a detected line, or nothing for lines without vg2 extent.
    static std::optional<LineTrack> make_track(const TransitionLine& line,
                                               const MeasurementWindow& w) {
        const PhysPoint a = to_physical(line.e0, w);
        const PhysPoint b = to_physical(line.e1, w);
        if (std::abs(line.e1.y - line.e0.y) < 3.0)
            return std::nullopt;  // needs a few rows of vg2 extent to extrapolate
        LineTrack t;
        t.slope = (b.vg1 - a.vg1) / (b.vg2 - a.vg2);
        t.vg1_ref = 0.5 * (a.vg1 + b.vg1);
        t.vg2_ref = 0.5 * (a.vg2 + b.vg2);
        return t;
    }

    /// Strongest line in a record that can seed a track; optionally must
    /// lie below (lower vg1 than) an exclusion locus.
    std::optional<LineTrack> pick_candidate(const MeasurementRecord& rec,
                                            const LineTrack* below = nullptr) const {
        std::optional<LineTrack> best;
        int best_support = -1;
        for (const auto& line : rec.lines) {
            const auto track = make_track(line, rec.map.window);
            if (!track)
                continue;
            if (below) {
                const double mid_vg2 = track->vg2_ref;
                if (track->at(mid_vg2) >= below->at(mid_vg2) - 0.1 * window_span_mv())
                    continue;  // same line as the one being descended from
            }
            if (line.support > best_support) {
                best_support = line.support;
                best = track;
            }
        }
        return best;
    }

    /// Line in the record closest to the predicted locus, within tolerance.
    std::optional<LineTrack> match_line(const MeasurementRecord& rec,
                                        const LineTrack& predicted) const {
        const MeasurementWindow& w = rec.map.window;
        const double center_vg2 = 0.5 * (w.vg2_start + w.vg2_stop);
        const double tol = cfg_.match_tol_frac * (w.vg1_stop - w.vg1_start);
        std::optional<LineTrack> best;
        double best_err = tol;
        for (const auto& line : rec.lines) {
            const auto track = make_track(line, w);
            if (!track)
                continue;
            const double err = std::abs(track->at(center_vg2) - predicted.at(center_vg2));
            if (err < best_err) {
                best_err = err;
                best = track;
            }
        }
        return best;
    }

    [[nodiscard]] double window_span_mv() const { return (n1_ - 1) * s1_; }

    [[nodiscard]] double empty_margin() const {
        if (cfg_.empty_margin_mv > 0.0)
            return cfg_.empty_margin_mv;
        double margin = std::max(50.0, 1.5 * window_span_mv());
        std::vector<double> xs = intercepts_;
        std::sort(xs.begin(), xs.end());
        for (std::size_t i = 1; i < xs.size(); ++i)
            margin = std::max(margin, 3.0 * (xs[i] - xs[i - 1]));
        return margin;
    }

    // ---- phases ----------------------------------------------------------

    void run_preliminary() {
        prelim_done_ = true;
        if (budget_used_ >= cfg_.max_measurements) {
            fail(TuneFailure::kBudgetExhausted, "measurement budget exhausted");
            return;
        }
        ++budget_used_;
        try {
            const auto prelim = preliminary_sweep(
                *src_, cfg_.start_window.vg2_start, vg1_of(i1_min_), vg1_of(i1_max_), s1_,
                cfg_.cycles_required, cfg_.signal);
            result_.background_frequency = prelim.frequency;
            result_.cutoff = prelim.cutoff;
            const double step_volts = s1_ * 1e-3;
            const int wanted = static_cast<int>(std::ceil(
                std::max(cfg_.cycles_required, cfg_.cycles_per_window) /
                    (prelim.frequency * step_volts) -
                1e-9));
            n1_ = std::max({prelim.width_px, wanted, kMinTraceLength});
            n1_ = static_cast<int>(std::min<long>(n1_, i1_max_ - i1_min_ + 1));
            n2_ = cfg_.window_height_px;
            result_.window_width_px = n1_;
        } catch (const SignalError& e) {
            fail(TuneFailure::kNoOscillation, e.what());
            return;
        }
        signal_ = cfg_.signal;
        signal_.fixed_cutoff = result_.cutoff;

        // First window: the high-vg1 corner of the user's start region.
        const long right = std::min(idx_round(cfg_.start_window.vg1_stop, o1_, s1_), i1_max_);
        search_ = clamp_window(right - (n1_ - 1), idx_round(cfg_.start_window.vg2_start, o2_, s2_),
                               n1_, n2_);
        phase_ = TunePhase::kSearchDiagonal;
    }

    void step_search() {
        const auto* rec = measure_window(search_);
        if (!rec)
            return;
        if (const auto cand = pick_candidate(*rec)) {
            candidate_ = *cand;
            return_phase_ = TunePhase::kSearchDiagonal;
            phase_ = TunePhase::kConfirm;
            return;
        }
        advance_search();
    }

    void advance_search() {
        const long d1 = std::max<long>(1, std::lround(cfg_.diagonal_step * (n1_ - 1)));
        const long d2 = std::max<long>(1, std::lround(cfg_.diagonal_step * (n2_ - 1)));
        const LatticeWindow next = clamp_window(search_.i1 - d1, search_.i2 + d2, n1_, n2_);
        if (next.i1 == search_.i1 && next.i2 == search_.i2) {
            fail(TuneFailure::kNoTransitionsInRange,
                 "no transitions found within the source range");
            return;
        }
        search_ = next;
    }

    void step_confirm() {
        const int n1c = static_cast<int>(std::lround(cfg_.confirm_scale * n1_));
        const int n2c = static_cast<int>(std::lround(cfg_.confirm_scale * n2_));
        const double center_vg2 = candidate_.vg2_ref;
        const LatticeWindow lw =
            clamp_window(idx_round(candidate_.at(center_vg2), o1_, s1_) - (n1c - 1) / 2,
                         idx_round(center_vg2, o2_, s2_) - (n2c - 1) / 2, n1c, n2c);
        const auto* rec = measure_window(lw);
        if (!rec)
            return;
        if (const auto hit = match_line(*rec, candidate_)) {
            track_ = *hit;
            intercepts_.push_back(track_.at(cfg_.start_window.vg2_start));
            confirm_band_i2_ = lw.i2;
            follow_band_i2_ = lw.i2 + n2c + cfg_.follow_gap_rows;
            miss_count_ = 0;
            phase_ = TunePhase::kFollowUp;
            return;
        }
        // False positive: resume whichever scan proposed the candidate.
        phase_ = return_phase_;
        if (phase_ == TunePhase::kSearchDiagonal)
            advance_search();
        else
            advance_descend();
    }

    void step_follow() {
        if (follow_band_i2_ + n2_ - 1 > i2_max_) {
            start_descend();  // cannot climb further; treat as disappeared
            return;
        }
        const double center_vg2 = vg2_of(follow_band_i2_) + 0.5 * (n2_ - 1) * s2_;
        if (track_.at(center_vg2) < vg1_of(i1_min_) + 0.25 * window_span_mv()) {
            start_descend();  // line leaves the reachable vg1 range
            return;
        }
        const LatticeWindow lw =
            clamp_window(idx_round(track_.at(center_vg2), o1_, s1_) - (n1_ - 1) / 2,
                         follow_band_i2_, n1_, n2_);
        const auto* rec = measure_window(lw);
        if (!rec)
            return;
        if (const auto hit = match_line(*rec, track_)) {
            track_ = *hit;
            miss_count_ = 0;
        } else if (++miss_count_ >= cfg_.broaden_patience) {
            start_descend();
            return;
        }
        follow_band_i2_ += n2_ + cfg_.follow_gap_rows;
    }

    void start_descend() {
        phase_ = TunePhase::kDescend;
        const double band_top_vg2 = vg2_of(confirm_band_i2_ + n2_ - 1);
        const long right = idx_floor(track_.at(band_top_vg2), o1_, s1_) - 4;
        descend_ = clamp_window(right - (n1_ - 1), confirm_band_i2_, n1_, n2_);
        descend_origin_mv_ = track_.at(band_top_vg2);
    }

    void step_descend() {
        const auto* rec = measure_window(descend_);
        if (!rec)
            return;
        if (const auto cand = pick_candidate(*rec, &track_)) {
            candidate_ = *cand;
            return_phase_ = TunePhase::kDescend;
            phase_ = TunePhase::kConfirm;
            return;
        }
        advance_descend();
    }

    void advance_descend() {
        const double travelled = descend_origin_mv_ - vg1_of(descend_.i1);
        if (travelled >= empty_margin()) {
            phase_ = TunePhase::kGlobalAnalysis;
            return;
        }
        const long d1 = std::max<long>(1, std::lround((1.0 - cfg_.descend_overlap) * (n1_ - 1)));
        const LatticeWindow next = clamp_window(descend_.i1 - d1, descend_.i2, n1_, n2_);
        if (next.i1 == descend_.i1) {
            phase_ = TunePhase::kGlobalAnalysis;  // vg1 range exhausted: dot is empty
            return;
        }
        descend_ = next;
    }

    void step_global() {
        // OR-union of every measured mask on the shared lattice.
        long c_lo = 0, c_hi = 0, r_lo = 0, r_hi = 0;
        bool first = true;
        for (const auto& rec : result_.log) {
            const MeasurementWindow& w = rec.map.window;
            const long c0 = idx_round(w.vg1_start, o1_, s1_);
            const long r0 = idx_round(w.vg2_start, o2_, s2_);
            const long c1 = c0 + rec.map.mask.cols() - 1;
            const long r1 = r0 + rec.map.mask.rows() - 1;
            if (first) {
                c_lo = c0, c_hi = c1, r_lo = r0, r_hi = r1;
                first = false;
            } else {
                c_lo = std::min(c_lo, c0);
                c_hi = std::max(c_hi, c1);
                r_lo = std::min(r_lo, r0);
                r_hi = std::max(r_hi, r1);
            }
        }
        TransitionMap global;
        global.window = to_window({c_lo, r_lo, static_cast<int>(c_hi - c_lo + 1),
                                   static_cast<int>(r_hi - r_lo + 1)});
        global.mask = Array2D<std::uint8_t>(static_cast<int>(r_hi - r_lo + 1),
                                            static_cast<int>(c_hi - c_lo + 1), 0);
        global.row_status.assign(static_cast<std::size_t>(global.mask.rows()), RowStatus::Ok);
        for (const auto& rec : result_.log) {
            const long c0 = idx_round(rec.map.window.vg1_start, o1_, s1_) - c_lo;
            const long r0 = idx_round(rec.map.window.vg2_start, o2_, s2_) - r_lo;
            for (int r = 0; r < rec.map.mask.rows(); ++r)
                for (int c = 0; c < rec.map.mask.cols(); ++c)
                    if (rec.map.mask(r, c))
                        global.mask(static_cast<int>(r0) + r, static_cast<int>(c0) + c) = 1;
        }

        auto lines = cfg_.detector == DetectorKind::kHough
                         ? detect_lines_hough(global, cfg_.hough)
                         : detect_lines_edlines(global, cfg_.edlines);

        result_.reference_vg2.mv = global.window.vg2_start;
        // Rank by the vg1 locus at the bottom edge of the explored region.
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t i = 0; i < lines.size(); ++i) {
            try {
                ranked.emplace_back(vg1_at_vg2(lines[i], global.window, result_.reference_vg2.mv),
                                    i);
            } catch (const GeometryError&) {
                // Lines without vg2 extent cannot be ranked; drop them.
            }
        }
        // Fragments with little support extrapolate wildly to the reference
        // edge. A real transition flags a couple of pixels per row across at
        // least one confirming window, so anything far below that is noise.
        const int support_floor = 2 * n2_;
        std::erase_if(ranked,
                      [&](const auto& pr) { return lines[pr.second].support < support_floor; });
        if (ranked.empty()) {
            fail(TuneFailure::kNothingDetected, "global analysis found no transition lines");
            return;
        }
        std::sort(ranked.begin(), ranked.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });

        // The same physical transition seen in overlapping windows can come
        // back as two slightly offset pieces; group intercepts closer than a
        // few flagged-run widths and keep the best-supported piece of each.
        const double group_tol = std::max(3.0 * median_run_px(global) * s1_, 4.0 * s1_);
        struct Group {
            double weighted_sum {0.0};
            double weight {0.0};
            std::size_t rep {0};
            int rep_support {-1};
        };
        std::vector<Group> groups;
        double prev_x = 0.0;
        for (const auto& [x, i] : ranked) {
            if (groups.empty() || x - prev_x > group_tol)
                groups.emplace_back();
            Group& g = groups.back();
            const int sup = lines[i].support;
            g.weighted_sum += x * sup;
            g.weight += sup;
            if (sup > g.rep_support) {
                g.rep_support = sup;
                g.rep = i;
            }
            prev_x = x;
        }

        result_.all_lines.clear();
        for (const auto& g : groups)
            result_.all_lines.push_back(lines[g.rep]);
        result_.first_transition = result_.all_lines.front();
        first_intercept_mv_ = groups.front().weighted_sum / groups.front().weight;
        second_intercept_mv_ = groups.size() > 1
                                   ? groups[1].weighted_sum / groups[1].weight
                                   : std::numeric_limits<double>::infinity();
        result_.global_window = global.window;
        result_.global_map = std::move(global);
        phase_ = TunePhase::kConfirmFirst;
    }

    void step_confirm_first() {
        const auto track = make_track(*result_.first_transition, result_.global_window);
        if (!track) {
            fail(TuneFailure::kFirstUnconfirmed, "first transition has no vg2 extent");
            return;
        }
        const int n1c = static_cast<int>(std::lround(cfg_.confirm_scale * n1_));
        const int n2c = static_cast<int>(std::lround(cfg_.confirm_scale * n2_));
        const LatticeWindow lw =
            clamp_window(idx_round(track->at(track->vg2_ref), o1_, s1_) - (n1c - 1) / 2,
                         idx_round(track->vg2_ref, o2_, s2_) - (n2c - 1) / 2, n1c, n2c);
        const auto* rec = measure_window(lw);
        if (!rec)
            return;
        const auto hit = match_line(*rec, *track);
        if (!hit) {
            fail(TuneFailure::kFirstUnconfirmed, "first transition failed confirmation");
            return;
        }
        finish(*rec);
    }

    void finish(const MeasurementRecord& confirm_rec) {
        // Offset from the measured flagged width of the confirming scan.
        double width_mv = median_run_px(confirm_rec.map) * s1_;
        if (!(width_mv > 0.0))
            width_mv = cfg_.hough.recon.width_prior * s1_;
        double offset = cfg_.final_offset_widths * width_mv;
        if (std::isfinite(second_intercept_mv_))
            offset = std::min(offset, 0.45 * (second_intercept_mv_ - first_intercept_mv_));
        offset = std::max(offset, 2.0 * s1_);

        result_.success = true;
        result_.final_vg1.mv = std::min(first_intercept_mv_ + offset, vg1_of(i1_max_));
        result_.final_vg2.mv = result_.reference_vg2.mv;
        result_.message = "single-electron regime located";
        phase_ = TunePhase::kDone;
    }

    /// Median over rows of the longest flagged run, in pixels.
    static double median_run_px(const TransitionMap& map) {
        std::vector<int> runs;
        for (int r = 0; r < map.mask.rows(); ++r) {
            int best = 0, cur = 0;
            for (int c = 0; c < map.mask.cols(); ++c) {
                cur = map.mask(r, c) ? cur + 1 : 0;
                best = std::max(best, cur);
            }
            if (best > 0)
                runs.push_back(best);
        }
        if (runs.empty())
            return 0.0;
        std::nth_element(runs.begin(), runs.begin() + static_cast<long>(runs.size() / 2),
                         runs.end());
        return static_cast<double>(runs[runs.size() / 2]);
    }

    void fail(TuneFailure code, const std::string& message) {
        phase_ = TunePhase::kFailed;
        result_.success = false;
        result_.failure = code;
        result_.message = message;
    }

    // ---- state -----------------------------------------------------------

    MeasurementSource* src_;
    TuneConfig cfg_;
    TuneResult result_;
    SignalParams signal_;

    double o1_ {0.0}, o2_ {0.0}, s1_ {1.0}, s2_ {1.0};
    long i1_min_ {0}, i1_max_ {0}, i2_min_ {0}, i2_max_ {0};

    TunePhase phase_ {TunePhase::kSearchDiagonal};
    bool prelim_done_ {false};
    int budget_used_ {0};
    int n1_ {0}, n2_ {0};

    LatticeWindow search_ {};
    LatticeWindow descend_ {};
    LineTrack candidate_ {};
    LineTrack track_ {};
    TunePhase return_phase_ {TunePhase::kSearchDiagonal};
    long confirm_band_i2_ {0};
    long follow_band_i2_ {0};
    int miss_count_ {0};
    double descend_origin_mv_ {0.0};
    std::vector<double> intercepts_;
    double first_intercept_mv_ {0.0};
    double second_intercept_mv_ {0.0};
};

/// Convenience wrapper: runs the full sequence in one call.
inline TuneResult run_tuning(MeasurementSource& source, const TuneConfig& cfg) {
    return Tuner(source, cfg).run();
}

}  // namespace dottuner
