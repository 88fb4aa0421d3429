#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cmdgoal {

/// Keeps large activation buffers on the heap between passes instead of
/// mapping and unmapping them per call. Idempotent.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace cmdgoal
