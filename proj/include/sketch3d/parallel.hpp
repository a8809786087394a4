#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace sketch3d {

/// Runs fn(shard) for shard in [0, num_shards) on up to hardware_concurrency
/// threads. Shard boundaries never depend on the thread count, so results
/// reduced in shard order are identical on any machine.
inline void parallel_shards(int num_shards, const std::function<void(int)>& fn) {
  const int workers =
      std::max(1, std::min<int>(num_shards, static_cast<int>(std::thread::hardware_concurrency())));
  if (workers <= 1) {
    for (int s = 0; s < num_shards; ++s) fn(s);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (int s = w; s < num_shards; s += workers) fn(s);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Half-open range of shard `s` when splitting `n` items into `num_shards`.
inline std::pair<int, int> shard_range(int n, int num_shards, int s) {
  const int begin = static_cast<int>(static_cast<long long>(n) * s / num_shards);
  const int end = static_cast<int>(static_cast<long long>(n) * (s + 1) / num_shards);
  return {begin, end};
}

}  // namespace sketch3d
