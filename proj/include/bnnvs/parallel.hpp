#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bnnvs {

/// Runs body(task) for task in [0, n_tasks) on up to `threads` workers.
/// Tasks are claimed dynamically; the first exception is rethrown after all
/// workers join. Callers that need deterministic sums write per-task partials
/// and merge them in task order afterwards.
template <typename Body>
void parallel_for(std::size_t n_tasks, int threads, Body&& body) {
  const std::size_t workers =
      std::min<std::size_t>(n_tasks, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t t = 0; t < n_tasks; ++t) body(t);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    for (;;) {
      const std::size_t t = next.fetch_add(1);
      if (t >= n_tasks) return;
      try {
        body(t);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next.store(n_tasks);
        return;
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

/// Fixed partition of [0, n) into contiguous shards of `shard_size` rows.
/// The partition depends only on n, never on the thread count.
struct ShardPlan {
  std::size_t n = 0;
  std::size_t shard_size = 256;

  std::size_t count() const { return n == 0 ? 0 : (n + shard_size - 1) / shard_size; }
  std::size_t begin(std::size_t s) const { return s * shard_size; }
  std::size_t end(std::size_t s) const { return std::min(n, (s + 1) * shard_size); }
};

inline int hardware_threads() {
  const unsigned h = std::thread::hardware_concurrency();
  return h == 0 ? 1 : static_cast<int>(h);
}

}  // namespace bnnvs
