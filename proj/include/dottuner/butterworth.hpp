#pragma once

// Butterworth high-pass design (bilinear transform with prewarping, split
// into second-order sections) plus zero-phase forward-backward filtering
// with odd-reflection padding and steady-state initial conditions.

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "dottuner/core.hpp"

namespace dottuner {

/// One biquad, direct form II transposed; a0 is normalized to 1.
struct Sos {
    double b0 {1.0}, b1 {0.0}, b2 {0.0};
    double a1 {0.0}, a2 {0.0};
};

/// Designs an order-n Butterworth high-pass. cutoff and sample_rate share
/// units (here cycles/V and samples/V); cutoff must sit below Nyquist.
inline std::vector<Sos> butterworth_highpass(int order, double cutoff, double sample_rate) {
    if (order < 1)
        throw ConfigError("butterworth: order must be >= 1");
    if (!(cutoff > 0.0) || !(sample_rate > 0.0) || cutoff >= 0.5 * sample_rate)
        throw ConfigError("butterworth: cutoff must lie in (0, sample_rate/2)");

    using cd = std::complex<double>;
    const double fs = sample_rate;
    const double warped = 2.0 * fs * std::tan(kPi * cutoff / fs);

    // Analog low-pass prototype poles on the unit circle, transformed to
    // high-pass (p -> wc/p; n zeros move to s = 0), then bilinear to z.
    std::vector<cd> zpoles;
    zpoles.reserve(static_cast<std::size_t>(order));
    const double k2fs = 2.0 * fs;
    cd gain_num = 1.0, gain_den = 1.0;  // evaluate overall H at z = -1 (analog infinity)
    for (int k = 1; k <= order; ++k) {
        const double theta = kPi * (2.0 * k + order - 1.0) / (2.0 * order);
        const cd proto = std::exp(cd(0.0, theta));
        const cd hp = warped / proto;
        const cd zp = (k2fs + hp) / (k2fs - hp);
        zpoles.push_back(zp);
        gain_num *= (-1.0 - zp);
        gain_den *= (-1.0 - 1.0);  // digital zeros all at z = +1
    }
    const double gain = (gain_num / gain_den).real();  // imaginary parts cancel in pairs

    // Pair conjugate poles into biquads; odd order leaves one real pole.
    std::sort(zpoles.begin(), zpoles.end(), [](const cd& a, const cd& b) {
        if (std::abs(a.imag()) != std::abs(b.imag()))
            return std::abs(a.imag()) > std::abs(b.imag());
        return a.imag() > b.imag();
    });
    std::vector<Sos> sections;
    std::size_t i = 0;
    while (i + 1 < zpoles.size()) {
        const cd p = zpoles[i];
        Sos s;
        s.b0 = 1.0;
        s.b1 = -2.0;
        s.b2 = 1.0;
        s.a1 = -2.0 * p.real();
        s.a2 = std::norm(p);
        sections.push_back(s);
        i += 2;
    }
    if (i < zpoles.size()) {
        Sos s;
        s.b0 = 1.0;
        s.b1 = -1.0;
        s.b2 = 0.0;
        s.a1 = -zpoles[i].real();
        s.a2 = 0.0;
        sections.push_back(s);
    }
    sections.front().b0 *= gain;
    sections.front().b1 *= gain;
    sections.front().b2 *= gain;
    return sections;
}

namespace detail {

/// DF2T state (s0, s1) that makes the section start in steady state for a
/// constant input x0 (the per-sample recurrence then reproduces y = Hdc*x0).
inline void steady_state(const Sos& s, double x0, double& s0, double& s1, double& y_out) {
    const double denom = 1.0 + s.a1 + s.a2;
    const double hdc = (s.b0 + s.b1 + s.b2) / denom;
    const double y = hdc * x0;
    s1 = s.b2 * x0 - s.a2 * y;
    s0 = s.b1 * x0 - s.a1 * y + s1;
    y_out = y;
}

inline void run_cascade(const std::vector<Sos>& sos, std::vector<double>& x) {
    std::vector<double> s0(sos.size()), s1(sos.size());
    double level = x.empty() ? 0.0 : x.front();
    for (std::size_t j = 0; j < sos.size(); ++j) {
        double y0;
        steady_state(sos[j], level, s0[j], s1[j], y0);
        level = y0;  // next section sees this section's DC output level
    }
    for (double& v : x) {
        for (std::size_t j = 0; j < sos.size(); ++j) {
            const Sos& s = sos[j];
            const double in = v;
            const double out = s.b0 * in + s0[j];
            s0[j] = s.b1 * in - s.a1 * out + s1[j];
            s1[j] = s.b2 * in - s.a2 * out;
            v = out;
        }
    }
}

}  // namespace detail

/// Single forward pass with steady-state initialization on x[0].
inline std::vector<double> sos_filter(const std::vector<Sos>& sos, const std::vector<double>& x) {
    if (x.empty())
        throw SignalError("sos_filter: empty input");
    std::vector<double> y(x);
    detail::run_cascade(sos, y);
    return y;
}

/// Zero-phase filtering: odd-reflection padding, forward pass, backward
/// pass, trim. Needs at least 2 samples.
inline std::vector<double> filtfilt(const std::vector<Sos>& sos, const std::vector<double>& x) {
    const int n = static_cast<int>(x.size());
    if (n < 2)
        throw SignalError("filtfilt: need at least 2 samples");
    const int pad = std::min(30, n - 1);

    std::vector<double> ext;
    ext.reserve(static_cast<std::size_t>(n + 2 * pad));
    for (int i = pad; i >= 1; --i)
        ext.push_back(2.0 * x.front() - x[static_cast<std::size_t>(i)]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (int i = 1; i <= pad; ++i)
        ext.push_back(2.0 * x.back() - x[static_cast<std::size_t>(n - 1 - i)]);

    detail::run_cascade(sos, ext);
    std::reverse(ext.begin(), ext.end());
    detail::run_cascade(sos, ext);
    std::reverse(ext.begin(), ext.end());

    return std::vector<double>(ext.begin() + pad, ext.begin() + pad + n);
}

}  // namespace dottuner
