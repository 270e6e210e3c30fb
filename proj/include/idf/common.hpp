#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace idf {

// Error taxonomy. The CLI maps these onto exit codes:
//   data_error -> 3, corruption_error -> 4, anything CLI-usage -> 2.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : error {
    using error::error;
};
struct data_error : error {
    using error::error;
};
// Corrupt/truncated/mismatched serialized artifacts (model files, containers, streams).
struct corruption_error : error {
    using error::error;
};

using Rng = std::mt19937_64;

// Uniform double in [0,1) with exactly 53 random mantissa bits. We avoid
// std::uniform_real_distribution so that streams are reproducible across
// standard libraries.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller on explicit uniforms, same portability rationale as uniform01.
inline double normal01(Rng& rng) {
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

// Derive a stream seed from a base seed and a couple of tags (splitmix64 mix).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

}  // namespace idf
