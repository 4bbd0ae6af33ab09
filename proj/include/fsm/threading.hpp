#ifndef FSM_THREADING_HPP
#define FSM_THREADING_HPP

#include <cstdint>
#include <functional>

namespace fsm {

// Global worker cap. 0 restores the hardware default.
void set_max_threads(int n);
int max_threads();

// Runs fn over [begin, end) split into contiguous chunks. Each range is
// handled by exactly one worker, so writes to per-index slots are race-free
// and results do not depend on the thread count. Work smaller than min_grain
// runs inline. Nested calls run inline on the calling thread.
void parallel_for(int64_t begin, int64_t end, int64_t min_grain,
                  const std::function<void(int64_t, int64_t)>& fn);

}  // namespace fsm

#endif
