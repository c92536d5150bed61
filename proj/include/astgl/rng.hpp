#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace astgl {

/// Deterministic counter-style generator (splitmix64 core). All randomness in the
/// project flows from one top-level seed through named substreams so that every
/// stage (grid, generation, init, shuffle, hpo) is reproducible in isolation.
class Rng {
public:
    Rng() : state_(0x9E3779B97F4A7C15ULL) {}
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1). 53-bit mantissa, platform-independent.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    template <typename T>
    const T& pick(const std::vector<T>& items) {
        return items[static_cast<std::size_t>(below(items.size()))];
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

/// FNV-1a over a label; used to derive independent named substreams.
inline std::uint64_t hash_label(const std::string& label) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    Rng r(seed ^ (salt * 0xD1B54A32D192ED03ULL));
    return r.next_u64();
}

inline std::uint64_t substream_seed(std::uint64_t seed, const std::string& name,
                                    std::uint64_t index = 0) {
    return mix_seed(mix_seed(seed, hash_label(name)), index);
}

/// Substream of `seed` identified by `name`; optional index for per-item streams.
inline Rng substream(std::uint64_t seed, const std::string& name, std::uint64_t index = 0) {
    return Rng(substream_seed(seed, name, index));
}

}  // namespace astgl
