#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace fcss {

namespace detail {
inline int initial_thread_count() {
  if (const char* env = std::getenv("FCSS_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}
inline int& thread_count_ref() {
  static int n = initial_thread_count();
  return n;
}
}  // namespace detail

// Worker count used by parallel_for. Defaults to $FCSS_THREADS or 1.
inline int num_threads() { return detail::thread_count_ref(); }
inline void set_num_threads(int n) { detail::thread_count_ref() = std::max(1, n); }

// Runs fn(i) for i in [begin, end) over contiguous chunks. Every index is
// visited by exactly one worker, so callers that write only slot i get the
// same result for any thread count.
template <typename Fn>
void parallel_for(int begin, int end, Fn&& fn) {
  const int n = end - begin;
  if (n <= 0) return;
  const int workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (int i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const int chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const int lo = begin + w * chunk;
    const int hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace fcss
