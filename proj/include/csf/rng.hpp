#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace csf {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; a bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Substream seed for (component, index) under a master seed. Streams for
/// distinct components or indices are decorrelated; the mapping is stable
/// across runs and independent of thread scheduling.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view component,
                                    std::uint64_t index = 0)
{
    return mix64(mix64(master ^ fnv1a64(component)) + mix64(index + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t master, std::string_view component, std::uint64_t index = 0)
{
    return Rng{derive_seed(master, component, index)};
}

} // namespace csf
