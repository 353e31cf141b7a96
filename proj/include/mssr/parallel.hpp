#pragma once

#include <cstddef>
#include <functional>

namespace mssr {

// Worker count used by parallel_for. 0 restores the default (MSSR_THREADS or
// the number of logical cores).
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs body(i) for i in [begin, end). Each index is handled by exactly one
// worker; callers that need deterministic reductions write per-index partials
// and combine them in index order afterwards.
// Keeps freed buffers in the process heap instead of returning them to the
// OS. Training reallocates the same multi-hundred-megabyte activations every
// step; without this each allocation is a fresh mmap plus page faults.
void retain_freed_memory();

void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& body);

}  // namespace mssr
