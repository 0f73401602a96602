#include "cxgn/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace cxgn {

namespace {

int default_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int n = std::min(hw, 8);
  if (const char* env = std::getenv("CXGN_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) n = cap;
  }
  return n;
}

int g_threads = default_threads();

// Minimal persistent pool: workers wait on a generation counter and run the
// current job's chunk. One job at a time; parallel_for never nests.
class Pool {
 public:
  explicit Pool(int workers) : workers_(workers) {
    for (int i = 1; i < workers; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    chunk_ = (n + workers_ - 1) / workers_;
    if (chunk_ <= 0) chunk_ = 1;
    n_ = n;
    body_ = &body;
    {
      std::lock_guard<std::mutex> lk(mu_);
      pending_count_ = workers_ - 1;
      ++generation_;
    }
    cv_.notify_all();
    run_chunk(0);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_count_ == 0; });
    body_ = nullptr;
  }

  int workers() const { return workers_; }

 private:
  void run_chunk(int i) {
    int64_t begin = i * chunk_;
    int64_t end = std::min<int64_t>(n_, begin + chunk_);
    if (begin < end) (*body_)(begin, end);
  }

  void worker_loop(int i) {
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
        if (stop_) return;
      }
      run_chunk(i);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--pending_count_ == 0) done_cv_.notify_one();
      }
    }
  }

  int workers_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  uint64_t generation_ = 0;
  int pending_count_ = 0;
  bool stop_ = false;
  int64_t n_ = 0, chunk_ = 0;
  const std::function<void(int64_t, int64_t)>* body_ = nullptr;
};

Pool* pool() {
  static Pool p(g_threads);
  return &p;
}

}  // namespace

int thread_count() { return g_threads; }

void set_thread_count(int n) {
  if (n >= 1) g_threads = n;  // takes effect before first parallel_for
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  if (g_threads == 1 || n == 1) {
    body(0, n);
    return;
  }
  pool()->run(n, body);
}

}  // namespace cxgn
