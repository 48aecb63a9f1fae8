#pragma once

#include <cstdint>
#include <random>

namespace larvseg {

// Every random draw in the project is keyed by (root seed, stream, index) so
// that any part of a run can be regenerated independently -- no shared mutable
// RNG stream exists between samples, steps or evaluation passes.

namespace stream {
inline constexpr std::uint64_t categories   = 0x01;
inline constexpr std::uint64_t seg_sample   = 0x02;
inline constexpr std::uint64_t multi_sample = 0x03;
inline constexpr std::uint64_t single_sample= 0x04;
inline constexpr std::uint64_t weight_init  = 0x05;
inline constexpr std::uint64_t batch_order  = 0x06;
inline constexpr std::uint64_t anchor_pick  = 0x07;
inline constexpr std::uint64_t val_sample   = 0x08;
inline constexpr std::uint64_t single_quota = 0x09;
}  // namespace stream

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream_tag,
                                 std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ (stream_tag * 0xd6e8feb86659fd93ULL)) + index);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream_tag,
                                std::uint64_t index = 0) {
    return std::mt19937_64(derive_seed(seed, stream_tag, index));
}

inline double draw_uniform(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(rng);
}

inline double draw_normal(std::mt19937_64& rng, double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(rng);
}

inline std::uint64_t draw_index(std::mt19937_64& rng, std::uint64_t count) {
    std::uniform_int_distribution<std::uint64_t> dist(0, count - 1);
    return dist(rng);
}

}  // namespace larvseg
