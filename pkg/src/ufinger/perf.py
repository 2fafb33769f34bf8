"""Process-level tuning for large numpy temporaries."""

import ctypes
import logging
import sys

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator() -> bool:
    """Keep freed feature maps in the glibc heap instead of unmapping them.

    Training allocates and frees hundreds of megabytes per step; without this
    every temporary pays fresh page faults. No-op off glibc.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(_M_TRIM_THRESHOLD, 1 << 31)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    log.debug("allocator tuning %s", "applied" if _done else "rejected")
    return _done
