#pragma once

#include <cmath>
#include <cstdint>

namespace qdiff {

// Deterministic counter-based generator (SplitMix64 over seed + counter).
// Every output is a pure function of (seed, stream, counter), so any draw
// sequence is reproducible from the stored 64-bit seed alone and is
// identical across platforms. std::random distributions are deliberately
// avoided: their output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : state_(mix(seed ^ mix(stream + 0x9E3779B97F4A7C15ull))) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        counter_ += 1;
        return mix(state_ + counter_ * 0x9E3779B97F4A7C15ull);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform index in [0, n) without modulo bias.
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return next_double() < p; }

    // Box-Muller; consumes exactly two uniforms per call.
    double gaussian(double mu, double sigma) {
        double u1 = 1.0 - next_double();  // (0, 1]
        double u2 = next_double();
        double z = std::sqrt(-2.0 * std::log(u1)) *
                   std::cos(2.0 * 3.14159265358979323846 * u2);
        return mu + sigma * z;
    }

    // Independent substream, e.g. one per distortion family.
    Rng fork(std::uint64_t stream) const { return Rng(state_, stream); }

private:
    std::uint64_t state_;
    std::uint64_t counter_ = 0;
};

}  // namespace qdiff
