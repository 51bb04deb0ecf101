#pragma once

#include <cstddef>
#include <functional>

namespace vmoba {

// Process-wide cap on worker threads used by parallel_for. Defaults to the
// hardware thread count. Setting 1 forces fully sequential execution.
void set_max_threads(int n);
int max_threads();

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each, using
// at most max_threads() workers. Every index is handled by exactly one worker,
// so results are identical for any thread count as long as fn writes only to
// state owned by its own index range.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace vmoba
