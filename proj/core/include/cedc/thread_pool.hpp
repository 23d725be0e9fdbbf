#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cedc {

/// Persistent worker pool for data-parallel kernels.
///
/// parallel_for splits [begin, end) into one contiguous block per worker, so
/// every array element is touched by exactly one thread and each element's
/// floating-point accumulation order is independent of the thread count.
/// Results are therefore bit-identical whether the pool has 1 or N threads.
class ThreadPool {
public:
  static ThreadPool& instance();

  /// Number of worker threads (>= 1). Controlled by CEDC_THREADS, default
  /// hardware concurrency.
  int size() const { return static_cast<int>(workers_.size()) + 1; }

  void parallel_for(std::int64_t begin, std::int64_t end,
                    const std::function<void(std::int64_t, std::int64_t)>& body);

  ~ThreadPool();

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

private:
  explicit ThreadPool(int threads);
  void worker_loop(int slot);

  struct Task {
    std::int64_t begin = 0;
    std::int64_t end = 0;
    const std::function<void(std::int64_t, std::int64_t)>* body = nullptr;
  };

  std::vector<std::thread> workers_;
  std::vector<Task> tasks_;
  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable done_;
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
};

/// Run body(b, e) over a partition of [begin, end) across the pool.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace cedc
