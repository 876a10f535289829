#pragma once

#include <cstddef>
#include <functional>

namespace egopat {

/// Worker cap: EGOPAT_THREADS if set and positive, else hardware concurrency.
unsigned worker_count(unsigned requested = 0);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// visited exactly once; callers write results by index so the outcome does
/// not depend on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace egopat
