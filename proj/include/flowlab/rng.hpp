#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace flowlab {

// splitmix64 finalizer; used for seed derivation.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Named sub-stream seed (data, init, time, noise, dropout, ...) from one master seed.
inline uint64_t substream_seed(uint64_t master, std::string_view name) {
    return splitmix64(master ^ fnv1a64(name));
}

// Counter-based per-step seed: lets training resume from a checkpoint without
// serializing engine state.
inline uint64_t step_seed(uint64_t stream, uint64_t step) {
    return splitmix64(stream ^ splitmix64(step + 1));
}

// mt19937_64 with hand-rolled distributions. The std engine is fully specified
// by the standard; std distributions are not, so the mappings live here.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal, Box-Muller (cosine branch)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // unbiased integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            const uint64_t x = eng_();
            if (x >= threshold) return x % n;
        }
    }

  private:
    std::mt19937_64 eng_;
};

}  // namespace flowlab
