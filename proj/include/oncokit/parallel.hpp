#pragma once

#include <cstddef>
#include <functional>

namespace oncokit {

/// Worker-pool size: ONCOKIT_THREADS when set to a positive integer, otherwise
/// the hardware concurrency (at least 1). Throws ConfigError on a malformed value.
std::size_t worker_count();

/// Calls fn(i) for i in [0, n) on up to `workers` threads (0 = worker_count()).
/// Each index runs exactly once; callers write results by index, so the outcome
/// does not depend on scheduling. The first exception thrown by any call is
/// rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = 0);

}  // namespace oncokit
