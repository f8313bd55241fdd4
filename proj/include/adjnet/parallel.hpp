#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace adjnet {

/// Worker count from ADJNET_THREADS; unset or 0 means single-threaded.
inline std::size_t thread_count() {
    static const std::size_t count = [] {
        const char* env = std::getenv("ADJNET_THREADS");
        if (env == nullptr) {
            return std::size_t{1};
        }
        const long v = std::strtol(env, nullptr, 10);
        return v <= 0 ? std::size_t{1} : static_cast<std::size_t>(v);
    }();
    return count;
}

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker, so
/// callers that write disjoint outputs per index get thread-count independent
/// results.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                fn(i);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
}

}  // namespace adjnet
