#include "daqe/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace daqe {

namespace {
thread_local bool in_parallel_region = false;
}

std::size_t worker_count() {
  static const std::size_t count = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DAQE_THREADS")) {
      try {
        long v = std::stol(env);
        if (v >= 1) return std::min<std::size_t>(hw, static_cast<std::size_t>(v));
      } catch (...) {
      }
    }
    return hw;
  }();
  return count;
}

void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& fn) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1 || in_parallel_region) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&](std::size_t w) {
    in_parallel_region = true;
    // static striping keeps the index-to-worker mapping fixed
    for (std::size_t i = begin + w; i < end; i += workers) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
    in_parallel_region = false;
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace daqe
