#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "crpsrft/errors.hpp"

namespace crpsrft {

/// Worker count: CRPSRFT_THREADS if set (>=1), else hardware concurrency.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("CRPSRFT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw ConfigError("CRPSRFT_THREADS must be a positive integer, got \"" +
                        std::string(env) + "\"");
    return static_cast<std::size_t>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? hc : 1;
}

/// Runs fn(i) for i in [0, n), splitting work across worker threads.
/// Each index is processed exactly once; results must be written to disjoint
/// slots so the outcome is identical regardless of thread count. The first
/// exception (if any) is rethrown on the calling thread.
inline void parallel_for(std::size_t n,
                         const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n ? n : std::size_t{1});
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto body = [&] {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace crpsrft
