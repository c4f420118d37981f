#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace kpft {

// xoshiro256** generator. All randomness in the library flows through this
// type so that runs are bit-reproducible across platforms; std:: distributions
// are avoided on purpose (their output is implementation-defined).
class Rng {
  public:
    explicit Rng(uint64_t seed) {
        // splitmix64 expansion of the seed into the four-word state
        uint64_t x = seed;
        for (auto& w : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            w = z ^ (z >> 31);
        }
    }

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

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (fixed algorithm, no cached spare so the
    // stream position is a pure function of the call count)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // unbiased integer in [0, bound) via rejection sampling
    uint64_t below(uint64_t bound) {
        const uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Fisher-Yates over an index vector
    void shuffle(std::vector<size_t>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

// FNV-1a, used to key named substreams off one run seed
inline uint64_t hash_stream_id(std::string_view id) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : id) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derive an independent named stream from a base seed. Stream ids in use:
//   "init/<param path>"  parameter initialization
//   "task/train", "task/eval"  synthetic dataset generation
//   "subsample"          low-resource subsampling
//   "shuffle/<epoch>"    per-epoch batch order
inline Rng stream(uint64_t seed, std::string_view id) {
    return Rng(seed ^ hash_stream_id(id));
}

}  // namespace kpft
