"""Process-level tuning that library code never applies on import."""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_TUNED = False


def tune_allocator(threshold=256 * 1024 * 1024):
    """Keep large numpy temporaries on the glibc heap instead of mmap.

    Full-batch training allocates and frees the same few-hundred-kilobyte
    buffers thousands of times; with the default dynamic threshold each one
    becomes an mmap/munmap pair. No-op on non-glibc platforms.
    """
    global _TUNED
    if _TUNED:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) and libc.mallopt(_M_TRIM_THRESHOLD, threshold)
    except (OSError, AttributeError):
        return False
    _TUNED = bool(ok)
    return _TUNED
