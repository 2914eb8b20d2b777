#pragma once

#include <cstddef>
#include <functional>

namespace warm {

// WARM_THREADS when set to a positive integer, otherwise hardware concurrency.
unsigned worker_count();

// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write results
// into index-addressed slots so output order never depends on scheduling.
// The first exception thrown by any fn is rethrown after all workers join.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace warm
