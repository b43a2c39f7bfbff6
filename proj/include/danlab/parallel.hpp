#pragma once

#include <cstddef>
#include <functional>

namespace danlab {

/// Worker count: DANLAB_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t worker_threads();

/// Calls f(i) for i in [0, n) on up to worker_threads() threads. The first
/// exception thrown by any call is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f);

}  // namespace danlab
