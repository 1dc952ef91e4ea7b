#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace duet {

// Small counter-free PRNG built on splitmix64. Every consumer owns its own
// stream, derived from (seed, purpose tags), so training runs are resumable
// without serializing generator state.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // Uniform in [lo, hi].
    int uniform_range(int lo, int hi) {
        return lo + int(uniform_int(uint64_t(hi - lo + 1)));
    }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Normal truncated to +/- 2 sigma, as used for parameter init.
    double truncated_normal(double std_dev) {
        double x = normal();
        while (std::fabs(x) > 2.0) x = normal();
        return x * std_dev;
    }

    // Deterministic in-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Substream derivation: fold a tag into the seed with one mixing round.
    static uint64_t derive(uint64_t seed, uint64_t tag) {
        Rng r(seed ^ (tag * 0xd6e8feb86659fd93ull + 0x2545f4914f6cdd1dull));
        return r.next_u64();
    }

private:
    uint64_t state_;
};

}  // namespace duet
