#pragma once

// Core value types shared by every module: grids, measurement windows,
// stability diagrams, error taxonomy and the thread helper.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dottuner {

// ============================================================================
// Errors
// ============================================================================

/// Bad user-supplied configuration or parameters.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or unreadable input/output data.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Signal-chain failure (degenerate trace, unseparable spectrum, ...).
class SignalError : public std::runtime_error {
public:
    explicit SignalError(const std::string& what) : std::runtime_error(what) {}
};

/// Degenerate geometry input (too few points, vertical lever arm, ...).
class GeometryError : public std::runtime_error {
public:
    explicit GeometryError(const std::string& what) : std::runtime_error(what) {}
};

// ============================================================================
// Basic values
// ============================================================================

/// A gate voltage in millivolts.
struct GateVoltage {
    double mv {0.0};
};

inline constexpr double kPi = 3.14159265358979323846;

/// Round-to-nearest integer with a guard against values that are an
/// epsilon short of an exact integer (e.g. (stop-start)/step on doubles).
inline long long nearest_index(double x, double tol = 1e-6) {
    const double r = std::round(x);
    if (std::abs(x - r) > tol * std::max(1.0, std::abs(r)))
        return -1;  // not close to an integer
    return static_cast<long long>(r);
}

// ============================================================================
// Array2D
// ============================================================================

/// Dense row-major 2-D array.
template <typename T>
class Array2D {
public:
    Array2D() = default;
    Array2D(int rows, int cols, T fill = T {})
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0)
            throw ConfigError("Array2D: negative dimensions");
    }

    [[nodiscard]] int rows() const { return rows_; }
    [[nodiscard]] int cols() const { return cols_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    [[nodiscard]] bool in_bounds(int r, int c) const {
        return r >= 0 && r < rows_ && c >= 0 && c < cols_;
    }

    [[nodiscard]] std::vector<T>& flat() { return data_; }
    [[nodiscard]] const std::vector<T>& flat() const { return data_; }

    bool operator==(const Array2D& o) const = default;

private:
    int rows_ {0};
    int cols_ {0};
    std::vector<T> data_;
};

// ============================================================================
// MeasurementWindow
// ============================================================================

/// Rectangular voltage region with fixed per-axis resolution.
/// Axis convention: columns sweep vg1, rows sweep vg2. All voltages in mV.
struct MeasurementWindow {
    double vg1_start {0.0};
    double vg1_stop {0.0};
    double vg1_step {1.0};
    double vg2_start {0.0};
    double vg2_stop {0.0};
    double vg2_step {1.0};

    /// Throws ConfigError unless both axes have positive step and an
    /// integer pixel count >= 1.
    void validate() const {
        check_axis("vg1", vg1_start, vg1_stop, vg1_step);
        check_axis("vg2", vg2_start, vg2_stop, vg2_step);
    }

    [[nodiscard]] int cols() const { return axis_count(vg1_start, vg1_stop, vg1_step); }
    [[nodiscard]] int rows() const { return axis_count(vg2_start, vg2_stop, vg2_step); }

    [[nodiscard]] double col_to_vg1(double col) const { return vg1_start + col * vg1_step; }
    [[nodiscard]] double row_to_vg2(double row) const { return vg2_start + row * vg2_step; }
    [[nodiscard]] double vg1_to_col(double vg1) const { return (vg1 - vg1_start) / vg1_step; }
    [[nodiscard]] double vg2_to_row(double vg2) const { return (vg2 - vg2_start) / vg2_step; }

    bool operator==(const MeasurementWindow& o) const = default;

private:
    static void check_axis(const char* name, double start, double stop, double step) {
        if (!std::isfinite(start) || !std::isfinite(stop) || !std::isfinite(step))
            throw ConfigError(std::string("window: non-finite ") + name + " axis");
        if (step <= 0.0)
            throw ConfigError(std::string("window: ") + name + "_step must be > 0");
        if (stop < start)
            throw ConfigError(std::string("window: ") + name + "_stop below start");
        if (nearest_index((stop - start) / step) < 0)
            throw ConfigError(std::string("window: (") + name + "_stop - " + name +
                              "_start)/step is not an integer pixel count");
    }

    static int axis_count(double start, double stop, double step) {
        const long long k = nearest_index((stop - start) / step);
        if (k < 0)
            throw ConfigError("window: non-integer pixel count");
        return static_cast<int>(k) + 1;
    }
};

// ============================================================================
// StabilityDiagram
// ============================================================================

/// Raw sensor currents on a measurement window; data(r, c) is the current
/// at (vg2_start + r*vg2_step, vg1_start + c*vg1_step).
struct StabilityDiagram {
    MeasurementWindow window;
    Array2D<double> data;

    void validate() const {
        window.validate();
        if (data.rows() != window.rows() || data.cols() != window.cols())
            throw ConfigError("diagram: data shape does not match window");
    }
};

// ============================================================================
// Threads
// ============================================================================

/// Worker-thread cap: DOTTUNER_THREADS if set (>0), else hardware concurrency.
inline int thread_cap() {
    if (const char* env = std::getenv("DOTTUNER_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v > 0)
            return static_cast<int>(std::min<long>(v, 256));
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
}

/// Runs fn(i) for i in [0, n) on up to thread_cap() workers. Falls back to a
/// plain loop when one worker suffices; any worker exception is rethrown.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    const int workers = std::min(thread_cap(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<int> next {0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1))
                    fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

}  // namespace dottuner
