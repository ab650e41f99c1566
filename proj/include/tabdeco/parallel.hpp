#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace tabdeco {

// Compute-thread cap from TABDECO_THREADS; unset means 1 (single-threaded).
inline int compute_threads() {
    static const int n = [] {
        const char* env = std::getenv("TABDECO_THREADS");
        if (env == nullptr) {
            return 1;
        }
        const int v = std::atoi(env);
        return v < 1 ? 1 : v;
    }();
    return n;
}

// Runs fn(i) for i in [0, n). With more than one compute thread the range is
// split into contiguous chunks, one worker per chunk; every index is still
// processed exactly once and each fn(i) writes only its own outputs, so the
// result is bit-identical to the single-threaded run.
template <typename Fn>
void parallel_for(int64_t n, int64_t grain, Fn&& fn) {
    const int threads = compute_threads();
    if (threads <= 1 || n < 2 || n < grain) {
        for (int64_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(threads, n));
    const int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const int64_t lo = w * chunk;
        const int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) {
            break;
        }
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) {
                fn(i);
            }
        });
    }
    for (std::thread& t : pool) {
        t.join();
    }
}

}  // namespace tabdeco
