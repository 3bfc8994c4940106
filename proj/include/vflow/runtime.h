#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace vflow
{
    /// Keeps large matrix buffers on the heap between training steps instead of returning them
    /// to the OS after every minibatch.
    inline void retain_heap_pages()
    {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    }
}
