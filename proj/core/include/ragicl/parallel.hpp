#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ragicl {

int default_workers();

// Runs fn(i) for i in [0, n) on up to `workers` threads, contiguous chunks per
// thread. Results must be written to per-index slots so any later reduction
// sees the same order regardless of the worker count. The first exception is
// rethrown after all threads join.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, int workers = 0) {
  if (workers <= 0) workers = default_workers();
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(workers, n));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> threads;
  threads.reserve(w);
  const std::size_t chunk = (n + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    threads.emplace_back([&, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace ragicl
