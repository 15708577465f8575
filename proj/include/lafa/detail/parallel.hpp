#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace lafa::detail {

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// visited exactly once, so callers writing into slot i get results that do
/// not depend on the thread count. The first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mutex;
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  workers.clear();
  if (error) std::rethrow_exception(error);
}

/// Pairwise (cascade) sum in a fixed order.
inline double pairwise_sum(const double* begin, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += begin[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(begin, half) + pairwise_sum(begin + half, n - half);
}

}  // namespace lafa::detail
