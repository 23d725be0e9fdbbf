#include "cedc/thread_pool.hpp"

#include <cstdlib>

namespace cedc {

namespace {

int configured_threads() {
  if (const char* env = std::getenv("CEDC_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool(configured_threads());
  return pool;
}

ThreadPool::ThreadPool(int threads) {
  const int extra = threads - 1;
  tasks_.resize(static_cast<std::size_t>(extra > 0 ? extra : 0));
  for (int i = 0; i < extra; ++i) {
    workers_.emplace_back([this, i] { worker_loop(i); });
  }
}

ThreadPool::~ThreadPool() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  wake_.notify_all();
  for (auto& w : workers_) w.join();
}

void ThreadPool::worker_loop(int slot) {
  std::uint64_t seen = 0;
  for (;;) {
    Task task;
    {
      std::unique_lock<std::mutex> lk(mu_);
      wake_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      task = tasks_[static_cast<std::size_t>(slot)];
    }
    if (task.body && task.begin < task.end) (*task.body)(task.begin, task.end);
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (--pending_ == 0) done_.notify_one();
    }
  }
}

void ThreadPool::parallel_for(std::int64_t begin, std::int64_t end,
                              const std::function<void(std::int64_t, std::int64_t)>& body) {
  const std::int64_t n = end - begin;
  if (n <= 0) return;
  const int parts = size();
  if (parts == 1 || n == 1) {
    body(begin, end);
    return;
  }
  // Fixed block partition: element -> thread assignment depends only on
  // (begin, end, pool size), never on scheduling.
  const std::int64_t block = (n + parts - 1) / parts;
  {
    std::lock_guard<std::mutex> lk(mu_);
    int used = 0;
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      const std::int64_t b = begin + block * static_cast<std::int64_t>(i + 1);
      const std::int64_t e = std::min(end, b + block);
      tasks_[i] = Task{b, e, &body};
      if (b < e) ++used;
    }
    pending_ = static_cast<int>(tasks_.size());
    ++generation_;
    (void)used;
  }
  wake_.notify_all();
  body(begin, std::min(end, begin + block));  // main thread takes block 0
  {
    std::unique_lock<std::mutex> lk(mu_);
    done_.wait(lk, [&] { return pending_ == 0; });
  }
}

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  ThreadPool::instance().parallel_for(begin, end, body);
}

}  // namespace cedc
