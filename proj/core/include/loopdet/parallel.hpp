#pragma once

#include <cstddef>
#include <functional>

namespace loopdet {

// Worker count: LOOPDET_WORKERS env override, else hardware concurrency
// (clamped to [1, 16]).
unsigned default_workers();

// Runs fn(i) for i in [0, n) across `workers` threads (block partition).
// Callers store per-index results into preallocated slots and reduce in
// index order afterwards, so outputs do not depend on scheduling or on the
// worker count.  The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn);

}  // namespace loopdet
