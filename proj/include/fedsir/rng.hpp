#pragma once

#include <cstdint>
#include <random>

namespace fedsir {

/// Stateless 64-bit mixer (splitmix64 finalizer). Used to derive independent
/// substream seeds from a run seed plus structural tags (client id, stage id),
/// so results do not depend on the order in which parties consume randomness.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag_a,
                              std::uint64_t tag_b) {
  return mix_seed(mix_seed(seed, tag_a), tag_b);
}

inline std::mt19937_64 seeded_rng(std::uint64_t seed) {
  return std::mt19937_64(seed);
}

/// Stage tags keep substreams of one run disjoint by construction.
namespace stream {
constexpr std::uint64_t datagen = 0xD474ULL;
constexpr std::uint64_t server_mask = 0x5EF1ULL;
constexpr std::uint64_t client_mask = 0xC11EULL;
constexpr std::uint64_t holdout_split = 0x5807ULL;
constexpr std::uint64_t train_mask = 0x7214ULL;
constexpr std::uint64_t dimension_tie = 0x71EBULL;
constexpr std::uint64_t benchmark = 0xBE9CULL;
}  // namespace stream

}  // namespace fedsir
