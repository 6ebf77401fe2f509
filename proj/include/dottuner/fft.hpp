#pragma once

// Thin FFTW wrappers. FFTW planning is not thread-safe, so plan creation
// and destruction are serialized behind one mutex; execution is free.

#include <algorithm>
#include <complex>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "dottuner/core.hpp"

namespace dottuner {

namespace detail {

inline std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace detail

/// Forward real-to-complex FFT; returns n/2 + 1 one-sided coefficients.
inline std::vector<std::complex<double>> rfft(const std::vector<double>& x) {
    if (x.empty())
        throw SignalError("rfft: empty input");
    const int n = static_cast<int>(x.size());
    std::vector<double> in(x);
    std::vector<std::complex<double>> out(static_cast<std::size_t>(n / 2 + 1));
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        plan = fftw_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<fftw_complex*>(out.data()),
                                    FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        fftw_destroy_plan(plan);
    }
    return out;
}

namespace detail {

inline std::vector<std::complex<double>> cfft(const std::vector<std::complex<double>>& x,
                                              int sign) {
    const int n = static_cast<int>(x.size());
    std::vector<std::complex<double>> in(x);
    std::vector<std::complex<double>> out(x.size());
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex());
        plan = fftw_plan_dft_1d(n, reinterpret_cast<fftw_complex*>(in.data()),
                                reinterpret_cast<fftw_complex*>(out.data()), sign, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex());
        fftw_destroy_plan(plan);
    }
    return out;
}

}  // namespace detail

/// Analytic signal via FFT one-siding: negative frequencies zeroed,
/// positive doubled, DC (and Nyquist for even n) kept. The transform is
/// circular; callers that care about edge behavior should extend the trace
/// before calling and crop afterwards.
inline std::vector<std::complex<double>> analytic_signal(const std::vector<double>& x) {
    const int n = static_cast<int>(x.size());
    if (n < 2)
        throw SignalError("analytic_signal: need at least 2 samples");
    std::vector<std::complex<double>> xc(x.begin(), x.end());
    auto spec = detail::cfft(xc, FFTW_FORWARD);
    const int pos_end = (n % 2 == 0) ? n / 2 : (n + 1) / 2;  // exclusive, before Nyquist
    for (int k = 1; k < pos_end; ++k)
        spec[static_cast<std::size_t>(k)] *= 2.0;
    const int neg_begin = (n % 2 == 0) ? n / 2 + 1 : (n + 1) / 2;
    for (int k = neg_begin; k < n; ++k)
        spec[static_cast<std::size_t>(k)] = 0.0;
    auto out = detail::cfft(spec, FFTW_BACKWARD);
    const double scale = 1.0 / static_cast<double>(n);
    for (auto& v : out)
        v *= scale;
    return out;
}

}  // namespace dottuner
