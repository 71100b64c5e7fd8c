#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace dccl {

// Stateless seed derivation. Every random decision in the system draws from
// an engine seeded by mixing the run seed with the tags that identify the
// decision site (round, stage, device, ...). Re-deriving the same tags yields
// the same stream, which is what makes runs resumable mid-lifecycle.

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_tag(std::uint64_t seed, std::uint64_t tag) {
  return mix64(seed ^ mix64(tag));
}

inline std::uint64_t mix_str(std::uint64_t seed, std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return mix_tag(seed, h);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view site,
                                 std::initializer_list<std::uint64_t> tags = {}) {
  std::uint64_t h = mix_str(seed, site);
  for (std::uint64_t t : tags) h = mix_tag(h, t);
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view site,
                                std::initializer_list<std::uint64_t> tags = {}) {
  return std::mt19937_64(derive_seed(seed, site, tags));
}

}  // namespace dccl
