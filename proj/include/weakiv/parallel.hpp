#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace weakiv {

// Worker count: WEAKIV_THREADS if set and positive, else the hardware count.
inline int default_thread_count() {
    if (const char* env = std::getenv("WEAKIV_THREADS")) {
        try {
            const int t = std::stoi(env);
            if (t > 0) return t;
        } catch (...) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// Runs body(i) for i in [0, count) on up to `threads` workers (0 = default).
// Work items are claimed dynamically; callers that need deterministic output
// write results into slot i rather than accumulating across items.
template <typename Body>
void parallel_for(std::size_t count, int threads, Body&& body) {
    const std::size_t workers =
        std::min<std::size_t>(count, static_cast<std::size_t>(threads > 0 ? threads : default_thread_count()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = count;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace weakiv
