#pragma once

#include <cstdint>
#include <functional>

namespace cxgn {

// Worker count: min(hardware, 8) unless CXGN_THREADS caps it lower (or raises it).
int thread_count();
void set_thread_count(int n);

// Splits [0, n) into contiguous chunks, one per worker. Each index is processed
// by exactly one thread, so results do not depend on the worker count as long as
// per-index work is order-independent (all callers guarantee that).
void parallel_for(int64_t n, const std::function<void(int64_t begin, int64_t end)>& body);

}  // namespace cxgn
