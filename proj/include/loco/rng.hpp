#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace loco {

// Deterministic RNG. std::mt19937_64 gives a fully specified bit stream, but
// the std distributions are implementation-defined, so the samplers here are
// written out explicitly to keep every trajectory reproducible bit-for-bit.
class Rng {
public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed into the 4-word state
        uint64_t z = seed;
        for (auto& s : state_) {
            z += 0x9e3779b97f4a7c15ull;
            uint64_t x = z;
            x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
            x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
            s = x ^ (x >> 31);
        }
    }

    // xoshiro256**
    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0, 1), 53-bit mantissa
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) {
        // multiply-shift; bias is negligible for the small n used here
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // standard normal via Box-Muller (both values used, cached)
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double ang = 6.283185307179586476925286766559 * u2;
        spare_ = mag * std::sin(ang);
        have_spare_ = true;
        return mag * std::cos(ang);
    }

    double normal(double mean, double stddev) { return mean + stddev * next_normal(); }

    // Fisher-Yates shuffle with the specified stream
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4]{};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// FNV-1a over arbitrary bytes; used for seed derivation and checksums.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Stable seed derivation: independent streams per (seed, label) pair.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
    uint64_t h = fnv1a64(&base, sizeof(base));
    return fnv1a64(label, h);
}

inline uint64_t derive_seed(uint64_t base, uint64_t salt) {
    uint64_t h = fnv1a64(&base, sizeof(base));
    return fnv1a64(&salt, sizeof(salt), h);
}

}  // namespace loco
