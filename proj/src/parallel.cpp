#include "weakvoc/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace weakvoc {

namespace {
std::atomic<int> override_limit{0};
}

void set_thread_limit(int n) { override_limit = std::max(0, n); }

int thread_limit() {
  if (const int o = override_limit.load(); o > 0) return o;
  const char* env = std::getenv("WEAKVOC_THREADS");
  if (!env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    return 1;
  }
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, int max_threads) {
  const int limit = max_threads > 0 ? max_threads : thread_limit();
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(limit), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace weakvoc
