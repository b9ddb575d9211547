#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace denomamba {

/// Worker cap from DENOMAMBA_THREADS (default 1, i.e. run inline).
inline std::size_t worker_threads() {
  const char* env = std::getenv("DENOMAMBA_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    const long v = std::stol(env);
    return v < 1 ? 1 : static_cast<std::size_t>(v);
  } catch (...) {
    return 1;
  }
}

/// Runs fn(i) for i in [0, n). Work is split into contiguous blocks; fn must
/// only write state owned by index i, which keeps results independent of the
/// thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t threads = worker_threads()) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t block = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * block;
    const std::size_t hi = std::min(n, lo + block);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace denomamba
