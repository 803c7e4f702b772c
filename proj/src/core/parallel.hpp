// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace wsmerge {

// Thread count from WSMERGE_THREADS, falling back to hardware concurrency.
unsigned default_thread_count();

// Runs fn(i) for i in [0, n). Work items must be independent. If several
// items throw, the exception from the lowest index is rethrown so the
// reported failure does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn && fn) {
    if (threads == 0) {
        threads = default_thread_count();
    }
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> pool;
        const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, n));
        pool.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto & e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

} // namespace wsmerge
