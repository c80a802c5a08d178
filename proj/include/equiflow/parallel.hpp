#pragma once

#include <cstddef>
#include <functional>

namespace equiflow {

/// Worker count: EQUIFLOW_THREADS if set and positive, else the hardware concurrency.
unsigned thread_limit();

/// Runs fn(0..n-1) on up to thread_limit() threads.  Each index runs exactly once and
/// the first exception (by index) is rethrown after every worker has finished.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace equiflow
