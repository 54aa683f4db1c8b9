#include "mialab/common/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace mialab {

std::uint64_t SplitMix64::below(std::uint64_t bound) noexcept {
    if (bound <= 1) return 0;
    std::uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * bound;
    auto low = static_cast<std::uint64_t>(m);
    if (low < bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        while (low < threshold) {
            x = next();
            m = static_cast<__uint128_t>(x) * bound;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::uint64_t>(m >> 64);
}

double SplitMix64::normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) noexcept {
    std::uint64_t h = basis;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()),
                   0xCBF29CE484222325ULL);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) noexcept {
    SplitMix64 mix(seed ^ fnv1a64(stage));
    return mix.next();
}

std::vector<std::size_t> permutation(std::size_t n, SplitMix64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    return idx;
}

}  // namespace mialab
