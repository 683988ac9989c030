#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace pocr {

// PCG32 (Melissa O'Neill, pcg-random.org). Used instead of <random> engines +
// distributions because libstdc++/libc++ distributions are implementation
// defined; this generator produces the same stream on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) { reseed(seed, stream); }

    void reseed(uint64_t seed, uint64_t stream = 0) {
        state_ = 0u;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    // Unbiased integer in [0, bound) via Lemire's method.
    uint32_t below(uint32_t bound) {
        uint64_t m = static_cast<uint64_t>(next_u32()) * bound;
        uint32_t lo = static_cast<uint32_t>(m);
        if (lo < bound) {
            uint32_t threshold = (0u - bound) % bound;
            while (lo < threshold) {
                m = static_cast<uint64_t>(next_u32()) * bound;
                lo = static_cast<uint32_t>(m);
            }
        }
        return static_cast<uint32_t>(m >> 32);
    }

    // Integer in [lo, hi] inclusive.
    int64_t range(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(below(static_cast<uint32_t>(hi - lo + 1)));
    }

    // Uniform in [0, 1).
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (uses two uint32 draws per pair).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = (next_u32() + 1.0) * (1.0 / 4294967297.0);  // in (0,1)
        double u2 = next_u32() * (1.0 / 4294967296.0);
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Normal(0, std) truncated to [-2*std, 2*std] by rejection.
    double trunc_normal(double stddev) {
        for (;;) {
            double v = normal();
            if (v >= -2.0 && v <= 2.0) return v * stddev;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = below(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t state() const { return state_; }
    uint64_t inc() const { return inc_; }
    void restore(uint64_t state, uint64_t inc) { state_ = state; inc_ = inc; }

private:
    uint64_t state_ = 0;
    uint64_t inc_ = 1;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// splitmix64; used to derive independent per-sample seeds from a master seed.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace pocr
