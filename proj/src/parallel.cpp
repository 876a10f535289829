#include "egopat/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace egopat {

unsigned worker_count(unsigned requested) {
    unsigned cap = std::thread::hardware_concurrency();
    if (cap == 0) cap = 1;
    if (const char* env = std::getenv("EGOPAT_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) cap = static_cast<unsigned>(v);
        } catch (const std::exception&) {
            // ignore malformed values
        }
    }
    if (requested > 0 && requested < cap) cap = requested;
    return cap;
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next.store(n);
                return;
            }
        }
    };
    const std::size_t count = std::min<std::size_t>(threads, n);
    std::vector<std::jthread> pool;
    pool.reserve(count - 1);
    for (std::size_t t = 1; t < count; ++t) pool.emplace_back(worker);
    worker();
    pool.clear();
    if (error) std::rethrow_exception(error);
}

}  // namespace egopat
