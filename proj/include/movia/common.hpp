#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace movia {

// Bad call-site arguments: mismatched shapes, out-of-range indices.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad data content: NaN/Inf, values outside their documented range,
// violated type invariants.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem and serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void check_valid(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

namespace detail {

inline bool& in_parallel_flag() {
  thread_local bool flag = false;
  return flag;
}

// Persistent workers; spawning a thread per loop costs ~100us in this
// environment, far more than the loops themselves.
class WorkerPool {
 public:
  static WorkerPool& get() {
    static WorkerPool pool(hardware_threads() - 1);
    return pool;
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn, int64_t grain) {
    if (n <= 0) return;
    int64_t max_chunks = static_cast<int64_t>(workers_.size()) + 1;
    int64_t chunks = std::min(max_chunks, (n + grain - 1) / grain);
    if (chunks <= 1 || in_parallel_flag() || workers_.empty()) {
      fn(0, n);
      return;
    }
    int64_t step = (n + chunks - 1) / chunks;
    {
      std::lock_guard<std::mutex> lk(m_);
      fn_ = &fn;
      n_ = n;
      step_ = step;
      active_ = static_cast<int>(chunks - 1);
      remaining_.store(static_cast<int>(chunks - 1), std::memory_order_release);
      ++gen_;
    }
    cv_work_.notify_all();
    in_parallel_flag() = true;
    fn(0, std::min(step, n));
    in_parallel_flag() = false;
    std::unique_lock<std::mutex> lk(m_);
    cv_done_.wait(lk, [&] { return remaining_.load(std::memory_order_acquire) == 0; });
  }

  ~WorkerPool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      quit_ = true;
      ++gen_;
    }
    cv_work_.notify_all();
    for (auto& w : workers_) w.join();
  }

 private:
  explicit WorkerPool(int n_workers) {
    for (int i = 0; i < n_workers; ++i)
      workers_.emplace_back([this, i] { worker_loop(i); });
  }

  void worker_loop(int index) {
    uint64_t seen = 0;
    std::unique_lock<std::mutex> lk(m_);
    while (true) {
      cv_work_.wait(lk, [&] { return quit_ || gen_ != seen; });
      if (quit_) return;
      seen = gen_;
      if (index >= active_) continue;
      const auto* fn = fn_;
      int64_t b = static_cast<int64_t>(index + 1) * step_;
      int64_t e = std::min(n_, b + step_);
      lk.unlock();
      if (b < e) {
        in_parallel_flag() = true;
        (*fn)(b, e);
        in_parallel_flag() = false;
      }
      if (remaining_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        {
          std::lock_guard<std::mutex> dk(m_);
          cv_done_.notify_one();
        }
      }
      lk.lock();
    }
  }

  std::vector<std::thread> workers_;
  std::mutex m_;
  std::condition_variable cv_work_, cv_done_;
  const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
  int64_t n_ = 0, step_ = 0;
  int active_ = 0;
  std::atomic<int> remaining_{0};
  uint64_t gen_ = 0;
  bool quit_ = false;
};

}  // namespace detail

// Runs fn over disjoint [begin,end) chunks of [0,n). Each worker owns its
// chunk exclusively, so the result is independent of scheduling. Ranges
// shorter than `grain` run inline.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn,
                         int64_t grain = 1) {
  detail::WorkerPool::get().run(n, fn, grain);
}

}  // namespace movia
