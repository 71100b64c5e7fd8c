#pragma once

#include <cstdint>
#include <cstring>
#include <span>

#include "dccl/tensor.hpp"

namespace dccl {

// FNV-1a over raw bytes. Used to fingerprint parameter tensors so tests can
// assert that a training stage left its frozen inputs untouched.

inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h = 0xCBF29CE484222325ull) {
  for (std::size_t e : t.shape()) {
    std::uint64_t v = e;
    h = fnv1a(&v, sizeof v, h);
  }
  if (t.size() > 0)
    h = fnv1a(t.data(), t.size() * sizeof(double), h);
  return h;
}

inline std::uint64_t hash_tensors(std::span<const Tensor* const> ts) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const Tensor* t : ts) h = hash_tensor(*t, h);
  return h;
}

}  // namespace dccl
