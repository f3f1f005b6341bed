#ifndef SEQCAL_PARALLEL_HPP
#define SEQCAL_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace seqcal {

// Process-wide worker bound for the parallel reductions (default 1).
void set_num_threads(int n);
int num_threads();

inline std::size_t chunk_count(std::size_t n, std::size_t chunk_size) {
  return (n + chunk_size - 1) / chunk_size;
}

// Calls fn(chunk_index, begin, end) once per fixed-size chunk of [0, n).
// Chunk boundaries depend only on n and chunk_size, never on the thread count,
// so callers that reduce per-chunk partials in chunk order get the same bits
// for any --threads value. If several chunks throw, the exception from the
// lowest chunk index is rethrown.
void parallel_for_chunks(
    std::size_t n, std::size_t chunk_size,
    const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

}  // namespace seqcal

#endif  // SEQCAL_PARALLEL_HPP
