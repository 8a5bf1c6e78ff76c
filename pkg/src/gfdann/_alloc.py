"""Keep large numpy buffers on the glibc heap.

Training allocates and frees megabyte-sized activations thousands of times a
second. With glibc defaults each one is a fresh mmap whose pages fault in on
first touch, which costs more than the arithmetic. Raising the mmap and trim
thresholds lets freed blocks be reused.
"""

import ctypes
import ctypes.util
import logging

logger = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Apply the heap settings once per process; False where unsupported."""
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = (
        mallopt(_M_MMAP_THRESHOLD, 512 * 1024 * 1024)
        and mallopt(_M_TRIM_THRESHOLD, 1024 * 1024 * 1024)
        and mallopt(_M_TOP_PAD, 128 * 1024 * 1024)
    )
    _done = bool(ok)
    if not ok:
        logger.debug("mallopt rejected heap settings")
    return _done
