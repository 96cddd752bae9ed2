#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace metnet {

// Deterministic RNG with hand-rolled samplers. std::normal_distribution and
// friends are implementation-defined, which would tie checkpoint bytes to the
// standard library version; these samplers pin the exact bit streams.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    // splitmix64
    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // Box-Muller, one value per call (the sibling is discarded so the stream
    // position is a pure function of the call count).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // Rejection-sampled normal truncated at +-2 sigma.
    double truncated_normal(double mean, double std) {
        double z = normal();
        while (z < -2.0 || z > 2.0) z = normal();
        return mean + std * z;
    }

    // Knuth, adequate for the small rates used by the episode generator.
    int poisson(double rate) {
        if (rate <= 0.0) return 0;
        const double l = std::exp(-rate);
        int k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > l);
        return k - 1;
    }

private:
    std::uint64_t state_;
};

// FNV-1a; used to derive stable per-name parameter seeds and profile hashes.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (const char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, const std::string& name) {
    return fnv1a(name, seed ^ 0xcbf29ce484222325ULL) | 1ULL;
}

}  // namespace metnet
