#pragma once
#include <cmath>
#include <cstdint>

namespace smim {

// Deterministic PRNG (splitmix64 core) with hand-rolled distributions.
// std::uniform_*_distribution is not pinned across standard libraries, and
// seeds here are part of the reproducibility contract: the same seed must
// give the same masks, phantoms and parameter init on every build, forever.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97f4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_int(uint64_t n) {
        // 128-bit multiply keeps the mapping unbiased enough for our n.
        return uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller (one value per call, cached pair).
    double gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.28318530717958647692 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // Derives an independent stream, e.g. one per training step.
    static uint64_t derive(uint64_t seed, uint64_t stream) {
        Rng r(seed ^ (0xA0761D6478BD642Full * (stream + 1)));
        return r.next_u64();
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace smim
