#pragma once

#include <cstddef>
#include <functional>

namespace daqe {

/// Worker cap; reads DAQE_THREADS once, defaults to hardware concurrency.
std::size_t worker_count();

/// Runs fn(i) for i in [begin, end). Each index is handled by exactly one
/// worker, so results are deterministic as long as fn(i) writes only to
/// slots owned by i. Nested calls run inline.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& fn);

}  // namespace daqe
