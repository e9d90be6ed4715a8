// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace ckptmerge {

inline constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ull;

/// SplitMix64 finalizer applied to `x + gamma`: the standard SplitMix64 step.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += kGoldenGamma;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Key of the random stream that drops elements of one model's task vector
/// for one tensor:
///   splitmix64(splitmix64(splitmix64(seed) ^ fnv1a64(name)) ^ model_index)
/// Depends only on these three values, never on execution order.
constexpr std::uint64_t dare_stream_key(std::uint64_t seed, std::string_view tensor_name, std::uint64_t model_index) {
    return splitmix64(splitmix64(splitmix64(seed) ^ fnv1a64(tensor_name)) ^ model_index);
}

/// Counter-based uniform draw in [0, 1): the `index`-th output of a SplitMix64
/// sequence whose state starts at `key`, truncated to 53 bits.
constexpr double stream_uniform(std::uint64_t key, std::uint64_t index) {
    const std::uint64_t bits = splitmix64(key + index * kGoldenGamma);
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

} // namespace ckptmerge
