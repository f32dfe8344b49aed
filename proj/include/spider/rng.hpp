#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace spider {

// Seed derivation scheme. Every random stream in the simulator is derived
// from (global seed, purpose tag, integer qualifiers), so per-client streams
// are independent of execution order and the whole run is reproducible.
//
//   init      : per-parameter-name weight initialization
//   lda       : dirichlet partition draws
//   client <k>: minibatch shuffling for client k
//   search <k>: random edge selection for client k
//   synth     : synthetic dataset generation

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    return splitmix64(seed ^ splitmix64(hash_str(tag)));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t n) {
    return splitmix64(derive_seed(seed, tag) ^ splitmix64(n + 0x51ed2701));
}

inline std::mt19937_64 make_rng(uint64_t seed, std::string_view tag) {
    return std::mt19937_64(derive_seed(seed, tag));
}

inline std::mt19937_64 make_rng(uint64_t seed, std::string_view tag, uint64_t n) {
    return std::mt19937_64(derive_seed(seed, tag, n));
}

}  // namespace spider
