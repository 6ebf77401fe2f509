#pragma once

// Levenberg-Marquardt fit of a Lorentzian with constant offset,
//   L(f) = offset + amplitude * hw^2 / ((f - center)^2 + hw^2),
// used to locate the low-frequency background lobe of a row spectrum.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dottuner/core.hpp"

namespace dottuner {

struct LorentzianFit {
    double center {0.0};
    double half_width {0.0};  ///< > 0 on success
    double amplitude {0.0};   ///< > 0 on success
    double offset {0.0};
    double residual_norm {0.0};
    int iterations {0};
};

/// Fits the four-parameter Lorentzian to (f, m) samples. Throws SignalError
/// when fewer than 5 samples are given or when the converged shape is not a
/// positive peak (amplitude and half-width must both end up positive).
inline LorentzianFit fit_lorentzian(const std::vector<double>& freq,
                                    const std::vector<double>& mag, int max_iterations = 200) {
    const std::size_t n = freq.size();
    if (n != mag.size())
        throw SignalError("fit_lorentzian: size mismatch");
    if (n < 5)
        throw SignalError("fit_lorentzian: need at least 5 samples");

    // Initial guess: peak sample sets center/amplitude, minimum sets offset,
    // half-width from the span of samples above half height.
    std::size_t peak = 0;
    double lo = mag[0], hi = mag[0];
    for (std::size_t i = 1; i < n; ++i) {
        if (mag[i] > hi) {
            hi = mag[i];
            peak = i;
        }
        lo = std::min(lo, mag[i]);
    }
    const double span = freq.back() - freq.front();
    double p_center = freq[peak];
    double p_off = lo;
    double p_amp = std::max(hi - lo, 1e-300);
    double p_hw = 0.0;
    {
        const double half = p_off + 0.5 * p_amp;
        double left = freq.front(), right = freq.back();
        for (std::size_t i = peak; i-- > 0;)
            if (mag[i] < half) {
                left = freq[i];
                break;
            }
        for (std::size_t i = peak + 1; i < n; ++i)
            if (mag[i] < half) {
                right = freq[i];
                break;
            }
        p_hw = std::max(0.5 * (right - left), span * 1e-3);
    }

    auto cost_of = [&](double c, double hw, double a, double off, Eigen::VectorXd* r) {
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = (freq[i] - c) * (freq[i] - c) + hw * hw;
            const double e = off + a * hw * hw / d - mag[i];
            if (r)
                (*r)(static_cast<Eigen::Index>(i)) = e;
            cost += e * e;
        }
        return cost;
    };

    Eigen::VectorXd r(static_cast<Eigen::Index>(n));
    double cost = cost_of(p_center, p_hw, p_amp, p_off, &r);
    double lambda = 1e-3;
    int iter = 0;
    for (; iter < max_iterations; ++iter) {
        Eigen::MatrixXd J(static_cast<Eigen::Index>(n), 4);
        for (std::size_t i = 0; i < n; ++i) {
            const double df = freq[i] - p_center;
            const double d = df * df + p_hw * p_hw;
            const double d2 = d * d;
            const auto row = static_cast<Eigen::Index>(i);
            J(row, 0) = p_amp * p_hw * p_hw * 2.0 * df / d2;      // d/d center
            J(row, 1) = 2.0 * p_amp * p_hw * df * df / d2;        // d/d half_width
            J(row, 2) = p_hw * p_hw / d;                          // d/d amplitude
            J(row, 3) = 1.0;                                      // d/d offset
        }
        const Eigen::MatrixXd jtj = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * r;

        bool stepped = false;
        for (int attempt = 0; attempt < 20; ++attempt) {
            Eigen::MatrixXd a = jtj;
            for (int k = 0; k < 4; ++k)
                a(k, k) += lambda * std::max(jtj(k, k), 1e-12);
            const Eigen::VectorXd delta = a.ldlt().solve(-g);
            double c2 = p_center + delta(0);
            double hw2 = p_hw + delta(1);
            double a2 = p_amp + delta(2);
            double off2 = p_off + delta(3);
            if (hw2 <= 0.0)
                hw2 = 0.5 * p_hw;  // keep the width positive; LM re-evaluates cost
            const double new_cost = cost_of(c2, hw2, a2, off2, nullptr);
            if (new_cost < cost) {
                const double improvement = cost - new_cost;
                p_center = c2;
                p_hw = hw2;
                p_amp = a2;
                p_off = off2;
                cost = cost_of(p_center, p_hw, p_amp, p_off, &r);
                lambda = std::max(lambda / 3.0, 1e-12);
                stepped = true;
                if (improvement < 1e-14 * (1.0 + cost))
                    iter = max_iterations;  // converged
                break;
            }
            lambda *= 5.0;
            if (lambda > 1e12)
                break;
        }
        if (!stepped)
            break;
    }

    if (!(p_amp > 0.0) || !(p_hw > 0.0))
        throw SignalError("fit_lorentzian: no positive peak in fit region");

    LorentzianFit fit;
    fit.center = p_center;
    fit.half_width = p_hw;
    fit.amplitude = p_amp;
    fit.offset = p_off;
    fit.residual_norm = std::sqrt(cost);
    fit.iterations = iter;
    return fit;
}

}  // namespace dottuner
