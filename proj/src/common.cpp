#include "darts/common.hpp"

#include <atomic>
#include <thread>
#include <vector>

namespace darts {

namespace {
std::atomic<int> g_max_threads{1};
}

int max_threads() { return g_max_threads.load(std::memory_order_relaxed); }

void set_max_threads(int n) {
    if (n < 1) n = 1;
    g_max_threads.store(n, std::memory_order_relaxed);
}

namespace detail {

void parallel_for_impl(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        threads.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : threads) t.join();
}

}  // namespace detail

}  // namespace darts
