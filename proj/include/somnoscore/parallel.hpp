#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace somnoscore {

// Static-partition parallel loop. Results written by index stay
// deterministic regardless of the thread count.
inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t begin, std::size_t end,
                                                  int worker)>& body) {
  if (threads <= 1 || n <= 1) {
    body(0, n, 0);
    return;
  }
  const int workers = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end, w] { body(begin, end, w); });
  }
  for (auto& t : pool) t.join();
}

// Pairwise summation; order-independent of any parallel fill of `values`.
inline double pairwise_sum(const double* values, std::size_t n) {
  if (n == 0) return 0.0;
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(values, half) + pairwise_sum(values + half, n - half);
}

}  // namespace somnoscore
