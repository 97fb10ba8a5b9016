#pragma once

#include <algorithm>
#include <cstdint>

namespace transolver {

// Instrumentation for the attention kernels.
//
// A CounterScope installs an OpCounters instance for the current thread; the
// kernels in linalg.hpp and physattn.hpp report into whatever scope is active.
// Counting is per-invocation: nothing is recorded when no scope is installed,
// and scopes nest (the innermost wins). Worker threads spawned by the parallel
// tile mode do not inherit the scope, so counts are only exact for sequential runs.
struct OpCounters {
  std::uint64_t madds = 0;          // multiply-adds issued by the dense kernels
  std::uint64_t softmax_elems = 0;  // elements pushed through softmax_rows
  std::uint64_t peak_weight_elems = 0;      // largest slice-weight buffer ever live
  std::uint64_t retained_weight_elems = 0;  // slice weights held for the backward pass
  std::uint64_t peak_retained_weight_elems = 0;

  void note_weight_buffer(std::uint64_t elems) {
    peak_weight_elems = std::max(peak_weight_elems, elems);
  }
  void retain_weights(std::uint64_t elems) {
    retained_weight_elems += elems;
    peak_retained_weight_elems = std::max(peak_retained_weight_elems, retained_weight_elems);
  }
  void release_weights(std::uint64_t elems) {
    retained_weight_elems -= std::min(retained_weight_elems, elems);
  }
};

namespace detail {
inline OpCounters*& active_counters() {
  thread_local OpCounters* current = nullptr;
  return current;
}
}  // namespace detail

class CounterScope {
 public:
  explicit CounterScope(OpCounters& c) : previous_(detail::active_counters()) {
    detail::active_counters() = &c;
  }
  ~CounterScope() { detail::active_counters() = previous_; }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  OpCounters* previous_;
};

inline OpCounters* counters() { return detail::active_counters(); }

inline void count_madds(std::uint64_t n) {
  if (auto* c = counters()) c->madds += n;
}

}  // namespace transolver
