#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace lfm {

inline int worker_count() {
  static int n = [] {
    if (const char* env = std::getenv("LFM_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
  }();
  return n;
}

// Minimal persistent pool used to fan the Monte Carlo sample axis of heavy
// kernels (convolutions) across threads. Tasks write disjoint outputs;
// determinism is preserved by reducing per-task partials in index order on
// the caller side.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(worker_count());
    return pool;
  }

  // Runs task(i) for i in [0, n). The caller participates, so a pool of size
  // one degenerates to serial execution. Not reentrant from inside a task.
  void run(int n, const std::function<void(int)>& task) {
    if (n <= 0) return;
    if (n == 1 || workers_.empty()) {
      for (int i = 0; i < n; ++i) task(i);
      return;
    }
    std::uint64_t gen;
    {
      std::lock_guard<std::mutex> lk(m_);
      task_ = &task;
      next_ = 0;
      limit_ = n;
      pending_ = n;
      gen = ++generation_;
      cv_.notify_all();
    }
    work_loop(gen);
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    task_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
      cv_.notify_all();
    }
    for (auto& t : workers_) t.join();
  }

 private:
  explicit ThreadPool(int n_threads) {
    for (int i = 1; i < n_threads; ++i) {
      workers_.emplace_back([this] { worker(); });
    }
  }

  // Pulls indices for generation `gen` only; bails out as soon as the job it
  // was recruited for is exhausted or superseded.
  void work_loop(std::uint64_t gen) {
    for (;;) {
      int idx;
      const std::function<void(int)>* task;
      {
        std::lock_guard<std::mutex> lk(m_);
        if (generation_ != gen || next_ >= limit_) return;
        idx = next_++;
        task = task_;
      }
      (*task)(idx);
      std::lock_guard<std::mutex> lk(m_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  void worker() {
    std::uint64_t seen = 0;
    for (;;) {
      std::uint64_t gen;
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] {
          return stop_ || (task_ != nullptr && generation_ != seen && next_ < limit_);
        });
        if (stop_) return;
        gen = generation_;
        seen = gen;
      }
      work_loop(gen);
    }
  }

  std::vector<std::thread> workers_;
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int)>* task_ = nullptr;
  int next_ = 0, limit_ = 0, pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

inline void parallel_for(int n, const std::function<void(int)>& task) {
  ThreadPool::instance().run(n, task);
}

}  // namespace lfm
