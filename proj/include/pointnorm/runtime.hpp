#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pointnorm {

// Keeps large activation buffers in the heap between batches instead of
// returning them to the OS on every free.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace pointnorm
