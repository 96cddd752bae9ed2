#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace metnet {

// METNET_THREADS caps internal parallelism; unset means hardware concurrency.
inline int thread_budget() {
    static const int budget = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        if (const char* env = std::getenv("METNET_THREADS")) {
            const int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return budget;
}

// Each index is handled by exactly one worker and every per-index reduction
// runs in a fixed sequential order inside fn, so results are bitwise
// independent of the worker count.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 1) {
    if (n <= 0) return;
    const int budget = thread_budget();
    const std::int64_t max_workers = std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, grain));
    const int workers = static_cast<int>(std::min<std::int64_t>(budget, max_workers));
    if (workers <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers - 1));
    for (int w = 1; w < workers; ++w) {
        const std::int64_t lo = w * chunk;
        const std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (std::int64_t i = 0; i < std::min(n, chunk); ++i) fn(i);
    for (auto& t : pool) t.join();
}

}  // namespace metnet
