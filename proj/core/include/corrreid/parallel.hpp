#pragma once

#include <cstddef>
#include <functional>

namespace corrreid {

/// Worker count: CORRREID_THREADS when set to a positive integer, else the
/// hardware concurrency (at least 1).
std::size_t thread_budget();

/// Runs body(i) for i in [0, n) over contiguous static blocks. Callers must
/// write only to slots owned by index i; results are then independent of the
/// thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace corrreid
