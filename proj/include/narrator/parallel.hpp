#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <semaphore>
#include <thread>
#include <vector>

namespace narrator {

/// Runs fn(0..count-1) on up to `workers` threads. Results must be written to
/// per-index slots by the caller, which keeps output order independent of
/// scheduling. The exception from the lowest failing index is rethrown.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (count == 0) return;
  workers = std::clamp<std::size_t>(workers, 1, count);
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_index = count;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
}

/// Bounds the number of in-flight backend requests.
class ConcurrencyLimiter {
 public:
  explicit ConcurrencyLimiter(std::size_t max_concurrent)
      : slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, max_concurrent))) {}

  class Permit {
   public:
    explicit Permit(std::counting_semaphore<>& s) : sem_(&s) { sem_->acquire(); }
    Permit(const Permit&) = delete;
    Permit& operator=(const Permit&) = delete;
    ~Permit() { sem_->release(); }

   private:
    std::counting_semaphore<>* sem_;
  };

  Permit acquire() { return Permit(slots_); }

 private:
  std::counting_semaphore<> slots_;
};

}  // namespace narrator
