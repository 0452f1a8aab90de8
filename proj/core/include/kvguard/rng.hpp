#pragma once

#include <cstdint>

namespace kvguard {

// Finalizer from SplitMix64. Used directly as a stateless counter hash for
// weight material and as the output mixer of the sequential stream below.
// std::mt19937 / std::uniform_*_distribution are avoided everywhere:
// distribution output is implementation-defined, and experiment streams must
// be reproducible from a seed across compilers.
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

constexpr uint64_t kGolden64 = 0x9E3779B97F4A7C15ull;

// Stateless hash of (seed, counter) -> uniform 64-bit word.
inline uint64_t counter_hash(uint64_t seed, uint64_t counter) {
    return mix64(seed + (counter + 1) * kGolden64);
}

// uniform in [-1, 1) from the top 24 bits of a word.
inline float unit_symmetric(uint64_t word) {
    return static_cast<float>(word >> 40) * 0x1p-23f - 1.0f;
}

// Sequential SplitMix64 stream.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += kGolden64;
        return mix64(state_);
    }

    // Unbiased uniform draw in [0, n) by rejection. n must be nonzero.
    uint64_t next_below(uint64_t n) {
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // uniform in [lo, hi] inclusive.
    int64_t next_range(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1p-53; }

    // Derive an independent child seed; tag distinguishes substreams.
    uint64_t fork(uint64_t tag) { return mix64(state_ ^ counter_hash(tag, 0x5eed)); }

  private:
    uint64_t state_;
};

}  // namespace kvguard
