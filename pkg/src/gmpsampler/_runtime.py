"""Process-level performance settings."""

import ctypes
import ctypes.util
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(threshold=256 * 1024 * 1024):
    """Keep mid-sized numpy buffers on the glibc heap instead of fresh mmaps.

    Batch-sized temporaries (a few hundred KB) otherwise get mapped and
    unmapped on every op, and the page faults cost more than the arithmetic.
    Returns True when the setting was applied.  Set
    ``GMPSAMPLER_NO_MALLOC_TUNING=1`` to skip it.
    """
    if os.environ.get("GMPSAMPLER_NO_MALLOC_TUNING") or not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 2 * threshold)
        return bool(ok)
    except (OSError, AttributeError):
        return False
