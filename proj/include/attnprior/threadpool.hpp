#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace attnprior {

/// Worker count: hardware concurrency capped by ATTNPRIOR_THREADS.
inline int worker_count() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  if (const char* env = std::getenv("ATTNPRIOR_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

/// Run fn(0..n_tasks) across workers. Task i always does the same work unit,
/// so outputs written to per-task slots are identical for any worker count;
/// merging happens in task-index order on the caller side.
inline void parallel_for(int n_tasks, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n_tasks);
  if (workers <= 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      for (int i = w; i < n_tasks; i += workers) fn(i);
    });
  for (auto& t : threads) t.join();
}

}  // namespace attnprior
