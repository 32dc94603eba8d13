// Counter-based deterministic RNG. A draw is a pure hash of (seed, position),
// so streams can be split into independent sub-streams without sharing state,
// and group rollouts stay reproducible no matter how they are scheduled.
#pragma once

#include <cmath>
#include <cstdint>

namespace recap {

namespace detail {

// splitmix64 finalizer; bijective with strong avalanche.
constexpr uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr uint64_t hash_pair(uint64_t a, uint64_t b) {
    return mix64(a ^ mix64(b + 0x632be59bd9b4e019ULL));
}

}  // namespace detail

class SeededRng {
   public:
    SeededRng() : seed_(0), pos_(0) {}
    explicit SeededRng(uint64_t seed) : seed_(seed), pos_(0) {}

    uint64_t seed() const { return seed_; }
    uint64_t position() const { return pos_; }

    uint64_t next_u64() { return detail::hash_pair(seed_, pos_++); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes two counter positions.
    double normal() {
        // u1 in (0,1] so the log is finite.
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Unbiased integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Derive an independent stream. Children of distinct keys (and of distinct
    // parents) do not collide with the parent stream or each other.
    SeededRng split(uint64_t key) const {
        SeededRng child;
        child.seed_ = detail::hash_pair(detail::mix64(seed_ ^ 0xd1b54a32d192ed03ULL), key);
        child.pos_ = 0;
        return child;
    }

   private:
    uint64_t seed_;
    uint64_t pos_;
};

}  // namespace recap
