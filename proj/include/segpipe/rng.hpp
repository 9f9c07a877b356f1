#ifndef SEGPIPE_RNG_HPP
#define SEGPIPE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string_view>

namespace segpipe {

/// Deterministic PRNG with named substreams.
///
/// Generator: xoshiro256++ seeded through splitmix64. Substreams are derived
/// by hashing (seed, tag, index) with FNV-1a, so the sequence for a given
/// (seed, purpose) pair is identical across runs and platforms; it never
/// depends on call order elsewhere in the program.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t seed() const { return seed_; }

    /// Independent substream for a named purpose ("init", "shuffle", ...).
    /// Derived from the construction seed, so it does not depend on how many
    /// values have been drawn from this generator.
    Rng stream(std::string_view tag, std::uint64_t index = 0) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        };
        mix(seed_);
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        mix(index);
        return Rng(h);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection-free via 128-bit multiply.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller (one value per call; the pair's second
    /// half is discarded to keep stream consumption position-independent).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool coin() { return (next_u64() >> 63) != 0; }

private:
    std::uint64_t seed_;
    std::uint64_t state_[4];

    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
};

} // namespace segpipe

#endif
