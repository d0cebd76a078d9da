#pragma once

#include <cstddef>
#include <functional>

namespace nsvit {

// Number of worker threads used by parallel_for. 0 = hardware concurrency.
void set_thread_count(int threads);
int thread_count();

// Runs fn(i) for i in [0, n) split into contiguous chunks, one worker per
// chunk. Each index must write only its own output slot; results are then
// independent of scheduling, which keeps parallel sections deterministic.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace nsvit
