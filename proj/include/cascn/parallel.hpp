#pragma once

#include <cstddef>
#include <functional>

namespace cascn {

// Worker cap for intra-op parallelism. Defaults to CASCN_THREADS when set,
// otherwise 1. Work is split into fixed contiguous chunks and every output
// element is produced by exactly one worker, so results do not depend on the
// thread count.
void set_thread_count(int n);
int thread_count();

void parallel_for(std::size_t n, const std::function<void(std::size_t begin, std::size_t end)>& fn,
                  std::size_t min_chunk = 1);

}  // namespace cascn
