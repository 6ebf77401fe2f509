#pragma once

// Counter-based deterministic noise source. Every draw is addressed by
// (seed, stream, index, channel), so any sample can be regenerated in
// isolation and measurement order cannot change the map between addresses
// and values.

#include <cmath>
#include <cstdint>

#include "dottuner/core.hpp"

namespace dottuner {

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// SplitMix-style hash of a four-part address.
inline std::uint64_t hash_address(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                                  std::uint64_t c) {
    std::uint64_t h = mix64(seed + 0x9E3779B97F4A7C15ull);
    h = mix64(h ^ (a + 0xD1B54A32D192ED03ull));
    h = mix64(h ^ (b + 0x8CB92BA72F3D8DD7ull));
    h = mix64(h ^ (c + 0xEB44ACCAB455D165ull));
    return h;
}

}  // namespace detail

/// Stateless addressed RNG; channels partition independent noise uses.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    /// Uniform double in [0, 1).
    [[nodiscard]] double uniform(std::uint64_t stream, std::uint64_t index,
                                 std::uint64_t channel) const {
        return static_cast<double>(detail::hash_address(seed_, stream, index, channel) >> 11) *
               0x1.0p-53;
    }

    /// Standard normal via Box-Muller on two sub-draws of the same address.
    [[nodiscard]] double gaussian(std::uint64_t stream, std::uint64_t index,
                                  std::uint64_t channel) const {
        const std::uint64_t h1 = detail::hash_address(seed_, stream, index, channel * 2 + 1);
        const std::uint64_t h2 = detail::hash_address(seed_, stream, index, channel * 2 + 2);
        const double u1 = (static_cast<double>(h1 >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        const double u2 = static_cast<double>(h2 >> 11) * 0x1.0p-53;          // [0, 1)
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    [[nodiscard]] std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
};

}  // namespace dottuner
