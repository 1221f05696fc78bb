#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>
#include <vector>

#include "cvt/tensor.hpp"

CVT_BEGIN_NAMESPACE
namespace detail {

// Splits [0, n) into contiguous chunks. Callers only write outputs owned by
// their chunk, so the result is independent of the thread count.
template <typename Fn>
void parallel_for(std::int64_t n, std::int64_t min_chunk, Fn&& fn) {
  int threads = num_threads();
  if (threads <= 1 || n < 2 * min_chunk) {
    fn(std::int64_t{0}, n);
    return;
  }
  std::int64_t chunks = std::min<std::int64_t>(threads, n / min_chunk);
  std::int64_t step = (n + chunks - 1) / chunks;
  std::vector<std::jthread> pool;
  for (std::int64_t c = 1; c < chunks; ++c) {
    std::int64_t b = c * step, e = std::min(n, b + step);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::int64_t{0}, std::min(n, step));
}

}  // namespace detail
CVT_END_NAMESPACE
