#pragma once

#include <cstddef>
#include <functional>

namespace fovea {

/// Worker count used by parallel_for. Defaults to FOVEA_THREADS or 1.
int thread_count();
void set_thread_count(int threads);

/// Calls fn(i) for i in [0, n). Work is split into contiguous blocks; callers
/// write results per index and reduce afterwards so sums stay reproducible.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace fovea
