#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace dccl {

// Splits [0, n) into a fixed number of contiguous chunks and runs fn(chunk,
// begin, end) for each. The chunk layout depends only on n and n_chunks,
// never on the worker count, so any result written per-chunk (and reduced in
// chunk order afterwards) is identical for 1 thread and for many.
inline std::size_t chunk_count(std::size_t n, std::size_t n_chunks) {
  if (n_chunks == 0) n_chunks = 1;
  return n < n_chunks ? (n == 0 ? 1 : n) : n_chunks;
}

inline void for_chunks(std::size_t n, std::size_t n_chunks, std::size_t threads,
                       const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const std::size_t chunks = chunk_count(n, n_chunks);
  const std::size_t base = n / chunks;
  const std::size_t extra = n % chunks;
  auto bounds = [&](std::size_t c) {
    std::size_t begin = c * base + (c < extra ? c : extra);
    std::size_t end = begin + base + (c < extra ? 1 : 0);
    return std::pair<std::size_t, std::size_t>{begin, end};
  };
  if (threads <= 1 || chunks == 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      auto [b, e] = bounds(c);
      fn(c, b, e);
    }
    return;
  }
  const std::size_t workers = threads < chunks ? threads : chunks;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t c = w; c < chunks; c += workers) {
        auto [b, e] = bounds(c);
        fn(c, b, e);
      }
    });
  }
  for (auto& t : pool) t.join();
}

inline std::size_t default_threads() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

}  // namespace dccl
