#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sifg {

// The samplers allocate and free the same few hundred-kilobyte temporaries on
// every step. With glibc's defaults each of those round-trips through mmap or
// a heap trim, which costs more than the arithmetic. Call once at start-up.
inline void keep_heap_mapped() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

}  // namespace sifg
