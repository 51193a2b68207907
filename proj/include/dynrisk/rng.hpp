#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace dynrisk {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Seed for a child stream, a pure function of the parent seed and the path
// of integer keys. Children never share state with each other or the parent,
// so results do not depend on the order in which tasks consume randomness.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t s = mix64(parent);
    for (auto k : keys) s = mix64(s ^ mix64(k + 0x632be59bd9b4e019ULL));
    return s;
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag) {
    return derive_seed(parent, {fnv1a(tag)});
}

// Uniform integer in [0, bound) from raw engine output (Lemire's method).
// Unlike std::uniform_int_distribution this is identical across standard libraries.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t bound) {
    std::uint64_t x = rng();
    __uint128_t m = static_cast<__uint128_t>(x) * bound;
    auto low = static_cast<std::uint64_t>(m);
    if (low < bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        while (low < threshold) {
            x = rng();
            m = static_cast<__uint128_t>(x) * bound;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::uint64_t>(m >> 64);
}

} // namespace dynrisk
