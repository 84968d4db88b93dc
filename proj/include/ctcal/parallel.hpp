#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace ctcal {

inline int default_thread_count() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Static contiguous partition of [begin, end). Each worker owns a disjoint
// range, so results are bit-identical for any thread count as long as the
// body writes only inside its range.
inline void parallel_for(std::int64_t begin, std::int64_t end, int threads,
                         const std::function<void(std::int64_t, std::int64_t)>& body) {
  const std::int64_t n = end - begin;
  if (n <= 0) return;
  if (threads <= 0) threads = default_thread_count();
  if (threads == 1 || n == 1) {
    body(begin, end);
    return;
  }
  const std::int64_t workers = std::min<std::int64_t>(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (std::int64_t w = 0; w < workers; ++w) {
    const std::int64_t lo = begin + w * chunk;
    const std::int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ctcal
