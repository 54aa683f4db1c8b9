#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace mialab {

/// SplitMix64 generator. Every random draw in the library goes through this
/// type so results are identical across compilers and standard libraries
/// (std::*_distribution output is implementation-defined).
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound). Lemire's multiply-shift with rejection.
    std::uint64_t below(std::uint64_t bound) noexcept;

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal() noexcept;

    bool bernoulli(double p) noexcept { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t state_;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) noexcept;

/// Sub-seed for a named stage: the top-level seed xor-ed with the stage-name
/// hash, then passed through one SplitMix64 round.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) noexcept;

/// Identity permutation 0..n-1 shuffled with `rng`.
std::vector<std::size_t> permutation(std::size_t n, SplitMix64& rng);

}  // namespace mialab
