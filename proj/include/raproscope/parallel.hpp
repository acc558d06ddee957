#pragma once

#include <cstddef>
#include <functional>

namespace raproscope {

// Worker count for `tasks` independent jobs: hardware concurrency, capped by
// the RAPROSCOPE_THREADS environment variable when it holds a positive integer.
std::size_t worker_count(std::size_t tasks);

// Runs fn(0..n-1) on worker_count(n) threads. If any call throws, the
// exception from the lowest index is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace raproscope
