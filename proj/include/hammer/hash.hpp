#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace hammer {

inline constexpr std::uint64_t fnv1a_offset = 14695981039346656037ULL;
inline constexpr std::uint64_t fnv1a_prime = 1099511628211ULL;

// 64-bit FNV-1a, incremental form: feed the previous digest back in as `state`.
inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t state = fnv1a_offset) {
    for (std::byte b : bytes) {
        state ^= static_cast<std::uint64_t>(b);
        state *= fnv1a_prime;
    }
    return state;
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t state = fnv1a_offset) {
    return fnv1a(std::as_bytes(std::span<const char>(text.data(), text.size())), state);
}

// splitmix64 finalizer; used to derive independent seeds from (seed, counter).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (counter + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace hammer
