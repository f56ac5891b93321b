#ifndef WEAKVOC_PARALLEL_HPP
#define WEAKVOC_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace weakvoc {

/// Worker cap: set_thread_limit() if called, else WEAKVOC_THREADS, else 1.
int thread_limit();
/// Process-wide override of the worker cap; 0 restores the environment value.
void set_thread_limit(int n);

/// Runs body(i) for i in [0, n) across up to thread_limit() threads. Each
/// index is processed exactly once; callers write results by index so the
/// outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, int max_threads = 0);

}  // namespace weakvoc

#endif  // WEAKVOC_PARALLEL_HPP
