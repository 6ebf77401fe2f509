#pragma once

// Background-removal signal chain. Per sweep row: one-sided power spectrum
// -> Lorentzian fit of the low-frequency background lobe -> high-pass
// cutoff -> zero-phase Butterworth -> analytic-signal instantaneous
// frequency -> threshold test flagging the sharply negative excursions
// that charge transitions imprint on the phase.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dottuner/butterworth.hpp"
#include "dottuner/core.hpp"
#include "dottuner/fft.hpp"
#include "dottuner/lorentzian.hpp"

namespace dottuner {

inline constexpr int kMinTraceLength = 16;

// Specific signal-chain failures (process_diagram maps them to row states).
class NoPeakError : public SignalError {
public:
    explicit NoPeakError(const std::string& what) : SignalError(what) {}
};
class UnseparableError : public SignalError {
public:
    explicit UnseparableError(const std::string& what) : SignalError(what) {}
};
class DegenerateTraceError : public SignalError {
public:
    explicit DegenerateTraceError(const std::string& what) : SignalError(what) {}
};

struct SignalParams {
    int filter_order {5};
    double cutoff_halfwidths {3.0};   ///< cutoff = lobe center + this * half-width
    /// Floor on the fitted cutoff, as a fraction of the oscillation peak.
    /// Short windows cannot resolve background structure much below one FFT
    /// bin; the floor keeps such unresolved components out of the passband.
    double min_cutoff_frac {0.1};
    double threshold_k {3.0};         ///< T = mean - k * max(sigma, sigma floor)
    /// Relative floor on the row sigma used by the threshold: sigma is clamped
    /// to at least this fraction of |mean|. Near-noiseless rows otherwise flag
    /// the percent-level systematic ripple the filter chain leaves near window
    /// edges; genuine dips are an order of magnitude deeper.
    double sigma_floor_frac {0.025};
    double edge_guard_frac {0.05};    ///< fraction of samples ignored at each end
    double peak_prominence {3.0};     ///< oscillation peak vs median magnitude
    int min_fit_bins {5};             ///< minimum spectrum bins handed to the fit
    bool median_prefilter {true};     ///< 3-sample median on the unwrapped phase
    bool pooled_stats {false};        ///< pool mean/sigma across all rows of a diagram
    /// When > 0, skip the per-row spectral fit and high-pass at this cutoff
    /// (cycles/V). Lets short windows reuse a cutoff fitted on a long sweep;
    /// the chain still rejects cutoffs at or above Nyquist.
    double fixed_cutoff {0.0};
};

// ============================================================================
// Spectrum
// ============================================================================

/// One-sided magnitude spectrum; frequencies in cycles per volt.
struct Spectrum {
    std::vector<double> freq;
    std::vector<double> mag;
};

/// step_mv is the sweep resolution in mV; needs >= kMinTraceLength samples.
inline Spectrum power_spectrum(const std::vector<double>& trace, double step_mv) {
    if (static_cast<int>(trace.size()) < kMinTraceLength)
        throw SignalError("power_spectrum: trace shorter than " +
                          std::to_string(kMinTraceLength) + " samples");
    if (!(step_mv > 0.0))
        throw ConfigError("power_spectrum: step must be > 0");
    const auto coef = rfft(trace);
    const double n = static_cast<double>(trace.size());
    const double df = 1.0 / (n * step_mv * 1e-3);  // cycles per volt
    Spectrum s;
    s.freq.reserve(coef.size());
    s.mag.reserve(coef.size());
    for (std::size_t k = 0; k < coef.size(); ++k) {
        s.freq.push_back(static_cast<double>(k) * df);
        s.mag.push_back(std::abs(coef[k]) / n);
    }
    return s;
}

// ============================================================================
// Cutoff extraction
// ============================================================================

/// Indices of the first non-DC magnitude minimum and of the dominant
/// oscillation peak beyond it (found on a 3-bin smoothed copy).
struct SpectralLandmarks {
    int first_min {0};
    int peak {0};
};

inline SpectralLandmarks find_landmarks(const Spectrum& s, double prominence) {
    const int n = static_cast<int>(s.mag.size());
    if (n < 4)
        throw NoPeakError("find_landmarks: spectrum too short");

    std::vector<double> sm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int a = std::max(0, i - 1);
        const int b = std::min(n - 1, i + 1);
        double acc = 0.0;
        for (int j = a; j <= b; ++j)
            acc += s.mag[static_cast<std::size_t>(j)];
        sm[static_cast<std::size_t>(i)] = acc / static_cast<double>(b - a + 1);
    }

    int m0 = -1;
    for (int i = 1; i + 1 < n; ++i) {
        if (sm[static_cast<std::size_t>(i)] <= sm[static_cast<std::size_t>(i - 1)] &&
            sm[static_cast<std::size_t>(i)] <= sm[static_cast<std::size_t>(i + 1)]) {
            m0 = i;
            break;
        }
    }
    if (m0 < 0)
        throw NoPeakError("find_landmarks: no minimum after the DC lobe");

    int peak = -1;
    double best = -1.0;
    for (int i = m0 + 1; i < n; ++i) {
        if (sm[static_cast<std::size_t>(i)] > best) {
            best = sm[static_cast<std::size_t>(i)];
            peak = i;
        }
    }
    if (peak < 0)
        throw NoPeakError("find_landmarks: no peak beyond the first minimum");

    std::vector<double> tail(sm.begin() + 1, sm.end());
    std::nth_element(tail.begin(), tail.begin() + static_cast<long>(tail.size() / 2), tail.end());
    const double med = tail[tail.size() / 2];
    if (!(best > prominence * std::max(med, 1e-300)))
        throw NoPeakError("find_landmarks: dominant peak lacks prominence");
    return {m0, peak};
}

struct CutoffResult {
    double cutoff {0.0};       ///< cycles per volt
    double peak_freq {0.0};    ///< dominant oscillation frequency
    LorentzianFit fit;
};

/// Fits the background lobe (bins from DC up to the first minimum, widened
/// to min_fit_bins, always below the peak) and places the high-pass cutoff
/// at center + cutoff_halfwidths * half_width. Throws UnseparableError when
/// that lands at or above the oscillation peak.
inline CutoffResult background_cutoff(const Spectrum& s, const SignalParams& p = {}) {
    const auto marks = find_landmarks(s, p.peak_prominence);
    int hi = std::max(marks.first_min, p.min_fit_bins - 1);
    hi = std::min(hi, marks.peak - 1);
    if (hi < p.min_fit_bins - 1)
        throw UnseparableError("background_cutoff: background lobe touches the peak");
    const std::vector<double> f(s.freq.begin(), s.freq.begin() + hi + 1);
    const std::vector<double> m(s.mag.begin(), s.mag.begin() + hi + 1);
    const LorentzianFit fit = fit_lorentzian(f, m);

    CutoffResult r;
    r.fit = fit;
    r.peak_freq = s.freq[static_cast<std::size_t>(marks.peak)];
    r.cutoff = std::max(fit.center + p.cutoff_halfwidths * fit.half_width,
                        p.min_cutoff_frac * r.peak_freq);
    if (!(r.cutoff > 0.0))
        throw UnseparableError("background_cutoff: non-positive cutoff");
    if (r.cutoff >= r.peak_freq)
        throw UnseparableError("background_cutoff: cutoff reaches the oscillation peak");
    return r;
}

// ============================================================================
// Instantaneous frequency
// ============================================================================

namespace detail {

inline void unwrap_inplace(std::vector<double>& phase) {
    for (std::size_t i = 1; i < phase.size(); ++i) {
        double d = phase[i] - phase[i - 1];
        d -= 2.0 * kPi * std::round(d / (2.0 * kPi));
        phase[i] = phase[i - 1] + d;
    }
}

inline void median3_inplace(std::vector<double>& v) {
    if (v.size() < 3)
        return;
    std::vector<double> out(v);
    for (std::size_t i = 1; i + 1 < v.size(); ++i) {
        double a = v[i - 1], b = v[i], c = v[i + 1];
        out[i] = std::max(std::min(a, b), std::min(std::max(a, b), c));
    }
    v.swap(out);
}

/// Burg-method AR coefficients a[0..order] (a[0] == 1) for the model
/// x[t] ~ -sum_j a[j] * x[t-j], minimizing forward plus backward prediction
/// error. Reflection coefficients stay in [-1, 1], so the predictor is
/// stable. Stops early (remaining coefficients zero) once the prediction
/// error is numerically exhausted.
inline std::vector<double> burg_coefficients(const std::vector<double>& x, int order) {
    const int n = static_cast<int>(x.size());
    std::vector<double> a(static_cast<std::size_t>(order) + 1, 0.0);
    a[0] = 1.0;
    if (n < 2 || order < 1)
        return a;
    std::vector<double> f(x), b(x);
    double dk = 0.0;
    for (int j = 0; j < n; ++j)
        dk += 2.0 * x[static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(j)];
    dk -= x[0] * x[0] + x[static_cast<std::size_t>(n - 1)] * x[static_cast<std::size_t>(n - 1)];
    const double dk_floor = 1e-14 * dk;
    for (int k = 0; k < order && k + 1 < n; ++k) {
        // Once the prediction error is down to rounding noise the lower-order
        // model is already exact; further reflection coefficients would be
        // 0/0 garbage and could push poles outside the unit circle.
        if (!(dk > dk_floor))
            break;
        double mu = 0.0;
        for (int j = 0; j <= n - k - 2; ++j)
            mu += f[static_cast<std::size_t>(j + k + 1)] * b[static_cast<std::size_t>(j)];
        mu *= -2.0 / dk;
        if (!(std::abs(mu) <= 1.0))
            break;
        for (int j = 0; j <= (k + 1) / 2; ++j) {
            const double t1 = a[static_cast<std::size_t>(j)] + mu * a[static_cast<std::size_t>(k + 1 - j)];
            const double t2 = a[static_cast<std::size_t>(k + 1 - j)] + mu * a[static_cast<std::size_t>(j)];
            a[static_cast<std::size_t>(j)] = t1;
            a[static_cast<std::size_t>(k + 1 - j)] = t2;
        }
        for (int j = 0; j <= n - k - 2; ++j) {
            const double t1 = f[static_cast<std::size_t>(j + k + 1)] + mu * b[static_cast<std::size_t>(j)];
            const double t2 = b[static_cast<std::size_t>(j)] + mu * f[static_cast<std::size_t>(j + k + 1)];
            f[static_cast<std::size_t>(j + k + 1)] = t1;
            b[static_cast<std::size_t>(j)] = t2;
        }
        dk = (1.0 - mu * mu) * dk - f[static_cast<std::size_t>(k + 1)] * f[static_cast<std::size_t>(k + 1)] -
             b[static_cast<std::size_t>(n - k - 2)] * b[static_cast<std::size_t>(n - k - 2)];
    }
    return a;
}

/// Extends a trace by pad samples per side with a Burg linear predictor
/// (the same coefficients run forward and backward; an AR model of a
/// stationary real signal is time-symmetric). Unlike mirror padding this
/// keeps the local oscillation phase advancing in the right direction, so
/// wrap-around transforms (analytic signal) see a seamless continuation.
inline std::vector<double> predictive_extend(const std::vector<double>& x, int pad, int order) {
    const int n = static_cast<int>(x.size());
    order = std::max(0, std::min(order, n / 2));
    double mean = 0.0;
    for (double v : x)
        mean += v;
    mean /= static_cast<double>(n);
    std::vector<double> out(static_cast<std::size_t>(n + 2 * pad), 0.0);
    for (int i = 0; i < n; ++i)
        out[static_cast<std::size_t>(pad + i)] = x[static_cast<std::size_t>(i)] - mean;
    if (order >= 1) {
        std::vector<double> z(out.begin() + pad, out.begin() + pad + n);
        const auto a = burg_coefficients(z, order);
        const int p = static_cast<int>(a.size()) - 1;
        for (int t = 0; t < pad; ++t) {
            double v = 0.0;
            for (int j = 1; j <= p; ++j)
                v -= a[static_cast<std::size_t>(j)] * out[static_cast<std::size_t>(pad + n + t - j)];
            out[static_cast<std::size_t>(pad + n + t)] = v;
        }
        for (int t = 0; t < pad; ++t) {
            double v = 0.0;
            for (int j = 1; j <= p; ++j)
                v -= a[static_cast<std::size_t>(j)] * out[static_cast<std::size_t>(pad - t + j - 1)];
            out[static_cast<std::size_t>(pad - 1 - t)] = v;
        }
    }
    for (double& v : out)
        v += mean;
    return out;
}

/// Zero-phase high-pass with predictive padding: the trace is extended by
/// Burg prediction over roughly three time constants of the slowest filter
/// pole before filtering and cropped afterwards. Windows much shorter than
/// the cutoff period then still come out clean, because the filter
/// transients settle inside the discarded extension.
inline std::vector<double> settled_highpass(const std::vector<Sos>& sos,
                                            const std::vector<double>& x, double cutoff,
                                            double fs, int order) {
    const int n = static_cast<int>(x.size());
    const double zeta = std::sin(kPi / (2.0 * static_cast<double>(std::max(1, order))));
    const double tau = fs / (2.0 * kPi * cutoff * zeta);  // samples
    const int pad = std::max(1, static_cast<int>(std::ceil(3.0 * tau)));
    const auto ext = predictive_extend(x, pad, std::min(8, n / 2));
    const auto filt = filtfilt(sos, ext);
    return std::vector<double>(filt.begin() + pad, filt.begin() + pad + n);
}

}  // namespace detail

/// Instantaneous frequency (cycles/V) of a background-free trace via the
/// analytic signal: unwrapped phase, optional 3-sample median, central
/// differences (one-sided at the ends). The trace is extended by linear
/// prediction before the transform and cropped after, which keeps the
/// circular wrap-around of the analytic signal from ringing into the
/// returned samples.
inline std::vector<double> instantaneous_frequency(const std::vector<double>& trace,
                                                   double step_mv, bool median_prefilter = true) {
    const std::size_t n = trace.size();
    if (n < 4)
        throw SignalError("instantaneous_frequency: need at least 4 samples");
    if (!(step_mv > 0.0))
        throw ConfigError("instantaneous_frequency: step must be > 0");
    double peak = 0.0;
    for (double v : trace)
        peak = std::max(peak, std::abs(v));
    if (!(peak > 1e-300))
        throw DegenerateTraceError("instantaneous_frequency: all-zero trace");

    const int ni = static_cast<int>(n);
    const int pad = std::min(ni - 1, std::max(16, ni / 4));
    const int order = std::min(8, ni / 2);
    const auto ext = detail::predictive_extend(trace, pad, order);
    const auto a = analytic_signal(ext);
    std::vector<double> phase(n);
    for (std::size_t i = 0; i < n; ++i)
        phase[i] = std::atan2(a[i + static_cast<std::size_t>(pad)].imag(),
                              a[i + static_cast<std::size_t>(pad)].real());
    detail::unwrap_inplace(phase);
    if (median_prefilter)
        detail::median3_inplace(phase);

    const double dv = step_mv * 1e-3;  // volts per sample
    std::vector<double> freq(n);
    freq[0] = (phase[1] - phase[0]) / (2.0 * kPi * dv);
    freq[n - 1] = (phase[n - 1] - phase[n - 2]) / (2.0 * kPi * dv);
    for (std::size_t i = 1; i + 1 < n; ++i)
        freq[i] = (phase[i + 1] - phase[i - 1]) / (2.0 * kPi * 2.0 * dv);
    return freq;
}

// ============================================================================
// Thresholding
// ============================================================================

struct RowDetection {
    double mean {0.0};
    double sigma {0.0};
    double threshold {0.0};
    std::vector<int> columns;  ///< interior samples below threshold, ascending
};

namespace detail {

struct Guard {
    int lo;  // first interior index
    int hi;  // one past last interior index
};

inline Guard interior(std::size_t n, double guard_frac) {
    const int g = std::max(1, static_cast<int>(std::ceil(guard_frac * static_cast<double>(n))));
    const Guard out {g, static_cast<int>(n) - g};
    if (out.hi - out.lo < 2)
        throw DegenerateTraceError("interior: edge guard leaves fewer than 2 samples");
    return out;
}

}  // namespace detail

/// Flags interior samples whose instantaneous frequency drops below
/// T = mean - k * max(sigma, sigma_floor_frac * |mean|); interior statistics,
/// population sigma. det.sigma reports the measured value, the threshold uses
/// the clamped one.
inline RowDetection detect_transitions_1d(const std::vector<double>& inst_freq, double k = 3.0,
                                          double edge_guard_frac = 0.05,
                                          double sigma_floor_frac = 0.025) {
    const auto g = detail::interior(inst_freq.size(), edge_guard_frac);
    double sum = 0.0, sum2 = 0.0;
    const double cnt = static_cast<double>(g.hi - g.lo);
    for (int i = g.lo; i < g.hi; ++i)
        sum += inst_freq[static_cast<std::size_t>(i)];
    const double mean = sum / cnt;
    for (int i = g.lo; i < g.hi; ++i) {
        const double d = inst_freq[static_cast<std::size_t>(i)] - mean;
        sum2 += d * d;
    }
    RowDetection det;
    det.mean = mean;
    det.sigma = std::sqrt(sum2 / cnt);
    det.threshold = mean - k * std::max(det.sigma, sigma_floor_frac * std::abs(mean));
    for (int i = g.lo; i < g.hi; ++i)
        if (inst_freq[static_cast<std::size_t>(i)] < det.threshold)
            det.columns.push_back(i);
    return det;
}

// ============================================================================
// process_diagram
// ============================================================================

enum class RowStatus : std::uint8_t { Ok = 0, NoPeak, Unseparable, Degenerate };

inline const char* to_string(RowStatus s) {
    switch (s) {
        case RowStatus::Ok: return "ok";
        case RowStatus::NoPeak: return "no_peak";
        case RowStatus::Unseparable: return "unseparable";
        case RowStatus::Degenerate: return "degenerate";
    }
    return "unknown";
}

/// Boolean transition map on the pixel grid of a diagram. Rows whose signal
/// chain failed stay empty and carry a non-Ok status.
struct TransitionMap {
    MeasurementWindow window;
    Array2D<std::uint8_t> mask;       ///< 0 = background, 1 = transition pixel
    std::vector<RowStatus> row_status;

    [[nodiscard]] std::size_t active_pixels() const {
        std::size_t n = 0;
        for (auto v : mask.flat())
            n += v != 0 ? 1 : 0;
        return n;
    }
};

/// Runs the whole chain on every row of a diagram. With pooled_stats the
/// interior mean/sigma are pooled over all successfully filtered rows and a
/// common threshold is applied; otherwise each row thresholds itself.
inline TransitionMap process_diagram(const StabilityDiagram& d, const SignalParams& p = {}) {
    d.validate();
    if (d.data.empty())
        throw ConfigError("process_diagram: empty diagram");
    const int rows = d.data.rows();
    const int cols = d.data.cols();

    TransitionMap map;
    map.window = d.window;
    map.mask = Array2D<std::uint8_t>(rows, cols, 0);
    map.row_status.assign(static_cast<std::size_t>(rows), RowStatus::Ok);

    std::vector<std::optional<std::vector<double>>> inst(static_cast<std::size_t>(rows));
    const double fs = 1.0 / (d.window.vg1_step * 1e-3);  // samples per volt

    parallel_for(rows, [&](int r) {
        std::vector<double> trace(static_cast<std::size_t>(cols));
        for (int c = 0; c < cols; ++c)
            trace[static_cast<std::size_t>(c)] = d.data(r, c);
        try {
            double cutoff = p.fixed_cutoff;
            if (!(cutoff > 0.0)) {
                const Spectrum spec = power_spectrum(trace, d.window.vg1_step);
                cutoff = background_cutoff(spec, p).cutoff;
            }
            if (cutoff >= 0.5 * fs)
                throw UnseparableError("process_diagram: cutoff at or above Nyquist");
            const auto sos = butterworth_highpass(p.filter_order, cutoff, fs);
            const auto filtered = detail::settled_highpass(sos, trace, cutoff, fs, p.filter_order);
            inst[static_cast<std::size_t>(r)] =
                instantaneous_frequency(filtered, d.window.vg1_step, p.median_prefilter);
        } catch (const NoPeakError&) {
            map.row_status[static_cast<std::size_t>(r)] = RowStatus::NoPeak;
        } catch (const UnseparableError&) {
            map.row_status[static_cast<std::size_t>(r)] = RowStatus::Unseparable;
        } catch (const DegenerateTraceError&) {
            map.row_status[static_cast<std::size_t>(r)] = RowStatus::Degenerate;
        } catch (const SignalError&) {
            map.row_status[static_cast<std::size_t>(r)] = RowStatus::Degenerate;
        }
    });

    if (!p.pooled_stats) {
        parallel_for(rows, [&](int r) {
            const auto& f = inst[static_cast<std::size_t>(r)];
            if (!f)
                return;
            const RowDetection det = detect_transitions_1d(*f, p.threshold_k, p.edge_guard_frac,
                                                           p.sigma_floor_frac);
            for (int c : det.columns)
                map.mask(r, c) = 1;
        });
        return map;
    }

    // Pooled statistics: one mean/sigma over all interiors, common threshold.
    double sum = 0.0, sum2 = 0.0;
    std::size_t cnt = 0;
    for (const auto& f : inst) {
        if (!f)
            continue;
        const auto g = detail::interior(f->size(), p.edge_guard_frac);
        for (int i = g.lo; i < g.hi; ++i) {
            sum += (*f)[static_cast<std::size_t>(i)];
            ++cnt;
        }
    }
    if (cnt < 2)
        return map;  // nothing usable; statuses already recorded
    const double mean = sum / static_cast<double>(cnt);
    for (const auto& f : inst) {
        if (!f)
            continue;
        const auto g = detail::interior(f->size(), p.edge_guard_frac);
        for (int i = g.lo; i < g.hi; ++i) {
            const double dd = (*f)[static_cast<std::size_t>(i)] - mean;
            sum2 += dd * dd;
        }
    }
    const double sigma = std::sqrt(sum2 / static_cast<double>(cnt));
    const double threshold =
        mean - p.threshold_k * std::max(sigma, p.sigma_floor_frac * std::abs(mean));
    for (int r = 0; r < rows; ++r) {
        const auto& f = inst[static_cast<std::size_t>(r)];
        if (!f)
            continue;
        const auto g = detail::interior(f->size(), p.edge_guard_frac);
        for (int i = g.lo; i < g.hi; ++i)
            if ((*f)[static_cast<std::size_t>(i)] < threshold)
                map.mask(r, i) = 1;
    }
    return map;
}

}  // namespace dottuner
