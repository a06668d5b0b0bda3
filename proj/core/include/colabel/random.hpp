#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace colabel {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Seed for a named sub-stream, e.g. derive_seed(seed, {stream_id, epoch}).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t s = mix_seed(seed);
    for (auto t : tags) s = mix_seed(s ^ mix_seed(t + 0x632BE59BD9B4E019ull));
    return s;
}

} // namespace colabel
