#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>
#include <vector>

namespace puredesk {

/// Worker-thread bound for data-parallel kernels (the --threads flag).
/// Work is split into fixed, disjoint index ranges and every element is
/// computed by exactly one thread with the same arithmetic as the sequential
/// path, so results are bit-identical for any thread count.
inline int& worker_threads() {
  static int n = 1;
  return n;
}

inline void set_worker_threads(int n) { worker_threads() = std::max(1, n); }

template <typename F>
void parallel_chunks(std::int64_t total, std::int64_t min_grain, F&& fn) {
  const int nt = static_cast<int>(std::min<std::int64_t>(
      worker_threads(), std::max<std::int64_t>(1, total / std::max<std::int64_t>(1, min_grain))));
  if (nt <= 1) {
    fn(std::int64_t(0), total);
    return;
  }
  const std::int64_t chunk = (total + nt - 1) / nt;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(nt - 1));
  for (int i = 1; i < nt; ++i) {
    const std::int64_t b = i * chunk, e = std::min<std::int64_t>(total, (i + 1) * chunk);
    if (b >= e) break;
    workers.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::int64_t(0), std::min<std::int64_t>(chunk, total));
  for (auto& w : workers) w.join();
}

}  // namespace puredesk
