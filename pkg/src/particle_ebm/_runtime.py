"""Process-level tuning for the numpy hot loops."""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(threshold: int = 256 * 2**20) -> bool:
    """Keep large numpy temporaries on the glibc heap.

    The per-layer activations (``n x hidden`` float64) exceed glibc's default
    mmap threshold, so every temporary is mmapped, page-faulted and unmapped
    again; that roughly doubles the cost of a forward/backward pass. Raising
    the mmap and trim thresholds lets freed blocks be reused. Returns False
    (and does nothing) where glibc's ``mallopt`` is unavailable.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, threshold) == 1
    ok &= mallopt(_M_TRIM_THRESHOLD, 2 * threshold) == 1
    return bool(ok)
