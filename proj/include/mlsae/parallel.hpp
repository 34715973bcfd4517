#pragma once

#include <cstddef>
#include <functional>

namespace mlsae {

/// Worker count: MLSAE_THREADS if set (>= 1), else hardware concurrency.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
/// visited exactly once; the first exception thrown is rethrown here.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mlsae
