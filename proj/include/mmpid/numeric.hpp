#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmpid {

// Pairwise (cascade) summation. The reduction tree depends only on the length,
// so the result is independent of how the inputs were produced.
double pairwise_sum(std::span<const double> values);

// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware concurrency).
// Work is split into contiguous chunks; fn must only write to slot i.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

// Process-wide default used when a caller passes threads = 0.
void set_default_threads(unsigned threads);
unsigned default_threads();

// 64-bit FNV-1a.
class Fnv1a {
 public:
  Fnv1a& bytes(const void* data, std::size_t size);
  Fnv1a& str(std::string_view s);
  Fnv1a& f64(double v);
  Fnv1a& u64(std::uint64_t v);
  std::uint64_t value() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

// Shortest round-trip decimal representation.
std::string format_double(double v);

}  // namespace mmpid
