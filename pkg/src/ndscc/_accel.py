"""Optional numba acceleration.

Set ``NDSCC_NUMBA=0`` before import to force the pure-numpy kernels.
"""

import os

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

NUMBA_AVAILABLE = _nb is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("NDSCC_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(func):
    """``numba.njit(cache=True, nogil=True)`` when numba is present, identity otherwise."""
    if _nb is None:  # pragma: no cover
        return func
    return _nb.njit(cache=True, nogil=True)(func)
