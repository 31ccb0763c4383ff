#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace voxcomp {

using Rng = std::mt19937_64;

/// Independent deterministic stream derived from a base seed and a tag path,
/// e.g. make_stream(seed, {stream::corpus, subject, variant}).
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    for (auto t : tags) {
        words.push_back(static_cast<std::uint32_t>(t));
        words.push_back(static_cast<std::uint32_t>(t >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

namespace stream {
inline constexpr std::uint64_t corpus = 0x636f7270;
inline constexpr std::uint64_t split = 0x73706c74;
inline constexpr std::uint64_t phantom = 0x7068616e;
inline constexpr std::uint64_t weights = 0x77656967;
inline constexpr std::uint64_t data_order = 0x6f726472;
}  // namespace stream

}  // namespace voxcomp
