#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace omniquad {

// Persistent pool executing an indexed task set. Tasks must write to disjoint
// outputs; callers reduce in a fixed order after run() returns, so results
// never depend on the worker count.
class ThreadPool {
 public:
  explicit ThreadPool(int workers) {
    const int n = std::max(1, workers) - 1;  // caller thread also works
    for (int i = 0; i < n; ++i) threads_.emplace_back([this] { worker_loop(); });
  }

  ~ThreadPool() {
    {
      std::unique_lock lock(mutex_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  int worker_count() const { return static_cast<int>(threads_.size()) + 1; }

  // Runs fn(0..n_tasks-1), blocking until all complete.
  void run(int n_tasks, const std::function<void(int)>& fn) {
    if (n_tasks <= 0) return;
    if (threads_.empty()) {
      for (int i = 0; i < n_tasks; ++i) fn(i);
      return;
    }
    auto state = std::make_shared<RunState>();
    state->fn = &fn;
    state->n = n_tasks;
    state->pending.store(n_tasks, std::memory_order_relaxed);
    {
      std::unique_lock lock(mutex_);
      current_ = state;
      ++generation_;
    }
    cv_.notify_all();
    drain(*state);
    std::unique_lock lock(state->done_mutex);
    state->done_cv.wait(lock, [&] { return state->pending.load(std::memory_order_acquire) == 0; });
  }

 private:
  struct RunState {
    const std::function<void(int)>* fn = nullptr;
    int n = 0;
    std::atomic<int> next{0};
    std::atomic<int> pending{0};
    std::mutex done_mutex;
    std::condition_variable done_cv;
  };

  // Once pending reaches zero every index has been executed, so a straggler
  // re-entering drain() on a stale state exits without touching fn.
  static void drain(RunState& s) {
    while (true) {
      const int i = s.next.fetch_add(1, std::memory_order_relaxed);
      if (i >= s.n) break;
      (*s.fn)(i);
      if (s.pending.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::unique_lock lock(s.done_mutex);
        s.done_cv.notify_all();
      }
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    while (true) {
      std::shared_ptr<RunState> state;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return generation_ != seen; });
        seen = generation_;
        if (stop_) return;
        state = current_;
      }
      if (state) drain(*state);
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::shared_ptr<RunState> current_;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace omniquad
