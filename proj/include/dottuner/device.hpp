#pragma once

// Synthetic single-electron-transistor charge-sensor device. The sensor
// current is an oscillation in vg1 whose phase slips by a fixed amount at
// every dot charge transition, on top of a slowly varying background:
//
//   I(vg1, vg2) = A(vg1, vg2) * sin(2*pi*f*vg1 + phi(vg1, vg2)) + B(vg1, vg2)
//   phi         = phase_jump * sum_k logistic((vg1 - locus_k(vg2)) / s(vg2))
//
// Transition loci are non-crossing quadratics in vg2; their width grows
// linearly with vg2 (thermal-style broadening) until lines fade out.
// Noise (white, telegraph, charge jitter) is counter-addressed so repeated
// measurements differ while a fixed seed keeps a whole session replayable.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dottuner/core.hpp"
#include "dottuner/rng.hpp"

namespace dottuner {

// ============================================================================
// Config
// ============================================================================

/// One charge transition: vg1 locus as a quadratic in (vg2 - vg2_ref).
struct TransitionCurve {
    int electron_number {1};   ///< dot occupation reached when crossing from below
    double vg1_at_ref {0.0};   ///< locus at vg2 = vg2_ref, in mV
    double slope {0.0};        ///< d(vg1)/d(vg2)
    double curvature {0.0};    ///< d2(vg1)/d(vg2)^2 / 2
};

/// Oscillation amplitude A(vg1, vg2): affine ramp times Gaussian dead zones.
struct AmplitudeModel {
    double base {1.0};
    double tilt_vg1 {0.0};  ///< per mV
    double tilt_vg2 {0.0};  ///< per mV

    struct DeadZone {
        double vg1_center {0.0};
        double vg2_center {0.0};
        double vg1_sigma {1.0};
        double vg2_sigma {1.0};
        double depth {1.0};  ///< 1 = fully dead at the center
    };
    std::vector<DeadZone> dead_zones;

    [[nodiscard]] double operator()(double vg1, double vg2) const {
        double a = base + tilt_vg1 * vg1 + tilt_vg2 * vg2;
        for (const auto& dz : dead_zones) {
            const double u = (vg1 - dz.vg1_center) / dz.vg1_sigma;
            const double v = (vg2 - dz.vg2_center) / dz.vg2_sigma;
            a *= 1.0 - dz.depth * std::exp(-0.5 * (u * u + v * v));
        }
        return std::max(a, 0.0);
    }
};

/// Slow background B(vg1, vg2): offset, gate cross-talk slopes, a mild
/// quadratic bow and a low-frequency ripple along vg1.
struct BackgroundModel {
    double offset {0.0};
    double slope_vg1 {0.0};      ///< per mV
    double slope_vg2 {0.0};      ///< per mV
    double quad_vg1 {0.0};       ///< per mV^2
    double ripple_amp {0.0};
    double ripple_freq {0.0};    ///< cycles per volt along vg1
    double ripple_phase {0.0};

    [[nodiscard]] double operator()(double vg1, double vg2) const {
        double b = offset + slope_vg1 * vg1 + slope_vg2 * vg2 + quad_vg1 * vg1 * vg1;
        if (ripple_amp != 0.0)
            b += ripple_amp * std::cos(2.0 * kPi * ripple_freq * vg1 * 1e-3 + ripple_phase);
        return b;
    }
};

struct NoiseModel {
    double white_sigma {0.0};          ///< additive Gaussian, current units
    double telegraph_amplitude {0.0};  ///< peak-to-peak two-level offset
    double telegraph_switch_rate {0.0};///< per-sample switch probability
    double charge_jitter_sigma {0.0};  ///< per-row shift of transition loci, mV
};

struct DeviceConfig {
    std::uint64_t seed {0};

    // Safe gate ranges, mV.
    double vg1_min {0.0};
    double vg1_max {1000.0};
    double vg2_min {0.0};
    double vg2_max {2500.0};

    double set_frequency {100.0};  ///< sensor oscillation, cycles per volt of vg1
    /// Phase slip per transition, radians.  The default pairs with
    /// transition_width so the slip decelerates the oscillation to a stall
    /// instead of reversing it, which keeps the instantaneous-frequency dip
    /// deep for every oscillation phase at the crossing.
    double phase_jump {-0.9 * kPi};
    double transition_width {2.8}; ///< FWHM of the phase-slip derivative at vg2_ref, mV
    double broadening_growth {0.0};///< fractional width growth per mV of vg2
    double visibility_factor {6.0};///< line counts as visible while width <= factor * pixel size
    double vg2_ref {0.0};          ///< vg2 where curve loci/widths are quoted

    AmplitudeModel amplitude;
    BackgroundModel background;
    NoiseModel noise;
    std::vector<TransitionCurve> transitions;
};

// ============================================================================
// Ground truth
// ============================================================================

/// Polyline of a visible transition in pixel coordinates of some window.
struct GroundTruthLine {
    int electron_number {0};
    struct Point {
        double col {0.0};
        double row {0.0};
    };
    std::vector<Point> points;
};

// ============================================================================
// DeviceModel
// ============================================================================

class DeviceModel {
public:
    explicit DeviceModel(DeviceConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
        validate(cfg_);
        // Keep transitions sorted by electron number; validate() guarantees
        // this also sorts them by vg1 at every vg2 in range.
        std::sort(cfg_.transitions.begin(), cfg_.transitions.end(),
                  [](const TransitionCurve& a, const TransitionCurve& b) {
                      return a.electron_number < b.electron_number;
                  });
    }

    DeviceModel(const DeviceModel&) = delete;
    DeviceModel& operator=(const DeviceModel&) = delete;

    [[nodiscard]] const DeviceConfig& config() const { return cfg_; }

    /// Throws ConfigError on inconsistent parameters or crossing transitions.
    static void validate(const DeviceConfig& c) {
        if (!(c.vg1_min < c.vg1_max) || !(c.vg2_min < c.vg2_max))
            throw ConfigError("device: empty gate range");
        if (!(c.set_frequency > 0.0))
            throw ConfigError("device: set_frequency must be > 0");
        if (!(c.transition_width > 0.0))
            throw ConfigError("device: transition_width must be > 0");
        if (!(c.visibility_factor > 0.0))
            throw ConfigError("device: visibility_factor must be > 0");
        if (c.noise.white_sigma < 0.0 || c.noise.telegraph_amplitude < 0.0 ||
            c.noise.charge_jitter_sigma < 0.0)
            throw ConfigError("device: negative noise level");
        if (c.noise.telegraph_switch_rate < 0.0 || c.noise.telegraph_switch_rate > 1.0)
            throw ConfigError("device: telegraph_switch_rate outside [0, 1]");

        // Width must stay positive over the whole vg2 range (linear in vg2).
        for (double vg2 : {c.vg2_min, c.vg2_max})
            if (width_of(c, vg2) <= 0.0)
                throw ConfigError("device: transition width non-positive inside vg2 range");

        std::vector<TransitionCurve> sorted = c.transitions;
        std::sort(sorted.begin(), sorted.end(),
                  [](const TransitionCurve& a, const TransitionCurve& b) {
                      return a.electron_number < b.electron_number;
                  });
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            if (sorted[i].electron_number < 1)
                throw ConfigError("device: electron_number must be >= 1");
            if (i > 0 && sorted[i].electron_number == sorted[i - 1].electron_number)
                throw ConfigError("device: duplicate electron_number");
        }
        // Non-crossing and ordered by vg1 at every vg2: sample densely.
        constexpr int kSamples = 257;
        for (int s = 0; s < kSamples; ++s) {
            const double vg2 =
                c.vg2_min + (c.vg2_max - c.vg2_min) * s / static_cast<double>(kSamples - 1);
            for (std::size_t i = 1; i < sorted.size(); ++i) {
                if (locus_of(c, sorted[i], vg2) <= locus_of(c, sorted[i - 1], vg2))
                    throw ConfigError("device: transition curves cross or touch inside range");
            }
        }
    }

    // ------------------------------------------------------------------
    // Clean model
    // ------------------------------------------------------------------

    /// vg1 locus of one transition at the given vg2.
    [[nodiscard]] double locus(const TransitionCurve& t, double vg2) const {
        return locus_of(cfg_, t, vg2);
    }

    /// Transition FWHM at the given vg2.
    [[nodiscard]] double width_at(double vg2) const { return width_of(cfg_, vg2); }

    /// Accumulated phase slip phi(vg1, vg2), no noise.
    [[nodiscard]] double transition_phase(double vg1, double vg2) const {
        return phase_with_shifts(vg1, vg2, nullptr);
    }

    /// Noise-free sensor current.
    [[nodiscard]] double set_current(double vg1, double vg2) const {
        return current_with_shifts(vg1, vg2, nullptr);
    }

    /// Sharp-limit dot occupation: number of transitions crossed from below.
    [[nodiscard]] int electron_count(double vg1, double vg2) const {
        int n = 0;
        for (const auto& t : cfg_.transitions)
            if (locus(t, vg2) < vg1)
                ++n;
        return n;
    }

    // ------------------------------------------------------------------
    // Measurement (noisy, consumes noise streams)
    // ------------------------------------------------------------------

    /// One vg1 sweep at fixed vg2. Each call advances the noise-stream
    /// counter by one row, so repeated sweeps differ.
    [[nodiscard]] std::vector<double> measure_sweep(double vg2, double vg1_start,
                                                    double vg1_stop, double vg1_step) const {
        MeasurementWindow w {vg1_start, vg1_stop, vg1_step, vg2, vg2, 1.0};
        w.validate();
        check_in_range(w);
        const std::uint64_t stream = next_stream_.fetch_add(1);
        std::vector<double> out(static_cast<std::size_t>(w.cols()));
        sample_row(stream, vg2, vg1_start, vg1_step, out);
        return out;
    }

    /// Raster scan of a window (row-major, one noise stream per row).
    [[nodiscard]] StabilityDiagram measure_diagram(const MeasurementWindow& w) const {
        w.validate();
        check_in_range(w);
        const int rows = w.rows();
        const int cols = w.cols();
        const std::uint64_t base = next_stream_.fetch_add(static_cast<std::uint64_t>(rows));
        StabilityDiagram d;
        d.window = w;
        d.data = Array2D<double>(rows, cols);
        std::vector<double> row(static_cast<std::size_t>(cols));
        for (int r = 0; r < rows; ++r) {
            sample_row(base + static_cast<std::uint64_t>(r), w.row_to_vg2(r), w.vg1_start,
                       w.vg1_step, row);
            for (int c = 0; c < cols; ++c)
                d.data(r, c) = row[static_cast<std::size_t>(c)];
        }
        return d;
    }

    // ------------------------------------------------------------------
    // Ground truth for scoring
    // ------------------------------------------------------------------

    /// Visible transition polylines inside a window, in pixel coordinates.
    /// A curve is dropped on rows where broadening exceeds
    /// visibility_factor * vg1_step; contiguous visible runs become separate
    /// polylines.
    [[nodiscard]] std::vector<GroundTruthLine> ground_truth_transitions(
        const MeasurementWindow& w) const {
        w.validate();
        std::vector<GroundTruthLine> out;
        const int rows = w.rows();
        const double max_width = cfg_.visibility_factor * w.vg1_step;
        for (const auto& t : cfg_.transitions) {
            GroundTruthLine current;
            current.electron_number = t.electron_number;
            auto flush = [&] {
                if (!current.points.empty()) {
                    out.push_back(current);
                    current.points.clear();
                }
            };
            for (int r = 0; r < rows; ++r) {
                const double vg2 = w.row_to_vg2(r);
                const double col = w.vg1_to_col(locus(t, vg2));
                const bool visible = width_at(vg2) <= max_width && col >= 0.0 &&
                                     col <= static_cast<double>(w.cols() - 1);
                if (visible)
                    current.points.push_back({col, static_cast<double>(r)});
                else
                    flush();
            }
            flush();
        }
        return out;
    }

    /// FWHM of d/dx logistic(x/s) equals this factor times s; callers can use
    /// it to convert transition_width into the underlying logistic scale.
    static constexpr double kLogisticWidthFactor = 3.5254943480781713;

private:
    enum Channel : std::uint64_t { kChWhite = 0, kChJitter = 8, kChTelegraphInit = 16,
                                   kChTelegraphSwitch = 24 };

    static double locus_of(const DeviceConfig& c, const TransitionCurve& t, double vg2) {
        const double d = vg2 - c.vg2_ref;
        return t.vg1_at_ref + t.slope * d + t.curvature * d * d;
    }

    static double width_of(const DeviceConfig& c, double vg2) {
        return c.transition_width * (1.0 + c.broadening_growth * (vg2 - c.vg2_ref));
    }

    void check_in_range(const MeasurementWindow& w) const {
        const double tol = 1e-9;
        if (w.vg1_start < cfg_.vg1_min - tol || w.vg1_stop > cfg_.vg1_max + tol ||
            w.vg2_start < cfg_.vg2_min - tol || w.vg2_stop > cfg_.vg2_max + tol)
            throw ConfigError("device: window outside safe gate ranges");
    }

    /// phi with optional per-curve locus shifts (charge jitter).
    [[nodiscard]] double phase_with_shifts(double vg1, double vg2,
                                           const std::vector<double>* shifts) const {
        const double s = width_at(vg2) / kLogisticWidthFactor;
        double phi = 0.0;
        for (std::size_t k = 0; k < cfg_.transitions.size(); ++k) {
            double center = locus(cfg_.transitions[k], vg2);
            if (shifts)
                center += (*shifts)[k];
            const double x = (vg1 - center) / s;
            // logistic with saturation guards
            double l;
            if (x > 40.0)
                l = 1.0;
            else if (x < -40.0)
                l = 0.0;
            else
                l = 1.0 / (1.0 + std::exp(-x));
            phi += cfg_.phase_jump * l;
        }
        return phi;
    }

    [[nodiscard]] double current_with_shifts(double vg1, double vg2,
                                             const std::vector<double>* shifts) const {
        const double omega = 2.0 * kPi * cfg_.set_frequency * vg1 * 1e-3 +
                             phase_with_shifts(vg1, vg2, shifts);
        return cfg_.amplitude(vg1, vg2) * std::sin(omega) + cfg_.background(vg1, vg2);
    }

    void sample_row(std::uint64_t stream, double vg2, double vg1_start, double vg1_step,
                    std::vector<double>& out) const {
        const auto& nz = cfg_.noise;
        std::vector<double> shifts(cfg_.transitions.size(), 0.0);
        if (nz.charge_jitter_sigma > 0.0)
            for (std::size_t k = 0; k < shifts.size(); ++k)
                shifts[k] = nz.charge_jitter_sigma * rng_.gaussian(stream, k, kChJitter);

        int telegraph = 0;  // -1 or +1 while active
        if (nz.telegraph_amplitude > 0.0)
            telegraph = rng_.uniform(stream, 0, kChTelegraphInit) < 0.5 ? 1 : -1;

        const std::vector<double>* sp = nz.charge_jitter_sigma > 0.0 ? &shifts : nullptr;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double vg1 = vg1_start + static_cast<double>(i) * vg1_step;
            double v = current_with_shifts(vg1, vg2, sp);
            if (telegraph != 0) {
                if (i > 0 && rng_.uniform(stream, i, kChTelegraphSwitch) < nz.telegraph_switch_rate)
                    telegraph = -telegraph;
                v += 0.5 * nz.telegraph_amplitude * telegraph;
            }
            if (nz.white_sigma > 0.0)
                v += nz.white_sigma * rng_.gaussian(stream, i, kChWhite);
            out[i] = v;
        }
    }

    DeviceConfig cfg_;
    CounterRng rng_;
    mutable std::atomic<std::uint64_t> next_stream_ {0};
};

}  // namespace dottuner
