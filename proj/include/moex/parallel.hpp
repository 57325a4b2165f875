#pragma once

#include <cstdint>
#include <functional>

namespace moex {

/// Worker count: hardware concurrency, capped by the MOEC_THREADS
/// environment variable when set.
int thread_count();

/// Runs body(begin, end) over [0, n) split into fixed-size chunks. Chunk
/// boundaries do not depend on the thread count, so any per-index output is
/// identical however many workers run.
void parallel_for(std::int64_t n, std::int64_t chunk,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace moex
