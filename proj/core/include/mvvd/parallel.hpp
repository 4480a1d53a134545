#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace mvvd {

// Runs f(lo, hi) over fixed-size chunks of [0, n). Chunk boundaries depend
// only on n and grain — never on the worker count — so any reduction that
// combines per-chunk results in chunk order is bit-deterministic regardless
// of how many threads execute it. An exception thrown by any chunk is
// rethrown (first one wins) after the workers join.
template <typename F>
void parallel_chunks(int64_t n, int64_t grain, F&& f) {
  if (n <= 0) return;
  if (grain <= 0) grain = 1;
  const int64_t nchunks = (n + grain - 1) / grain;
#if defined(_OPENMP)
  if (nchunks > 1) {
    std::exception_ptr err;
    std::atomic<bool> raised{false};
#pragma omp parallel for schedule(static)
    for (int64_t ci = 0; ci < nchunks; ++ci) {
      const int64_t lo = ci * grain;
      try {
        f(lo, std::min(n, lo + grain));
      } catch (...) {
        if (!raised.exchange(true)) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
    return;
  }
#endif
  for (int64_t ci = 0; ci < nchunks; ++ci) {
    const int64_t lo = ci * grain;
    f(lo, std::min(n, lo + grain));
  }
}

// Convenience: pick a grain so ~target chunks cover n.
inline int64_t grain_for(int64_t n, int64_t target_chunks = 64) {
  if (n <= 0) return 1;
  return std::max<int64_t>(1, (n + target_chunks - 1) / target_chunks);
}

}  // namespace mvvd
