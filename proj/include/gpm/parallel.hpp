#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace gpm {

// Runs work(i) for i in [0, n). Work is dealt out in fixed-size chunks from
// an atomic counter, so the set of computations (and anything derived from
// per-index seeding) is identical for every worker count.
template <typename Fn>
void parallel_for_chunks(size_t n, int workers, Fn&& work, size_t chunk = 64) {
    if (workers <= 1 || n <= chunk) {
        for (size_t i = 0; i < n; ++i) work(i);
        return;
    }
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            size_t begin = next.fetch_add(chunk);
            if (begin >= n) return;
            size_t end = std::min(begin + chunk, n);
            for (size_t i = begin; i < end; ++i) work(i);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

}  // namespace gpm
